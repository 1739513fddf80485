//! `PROSO-CKPT v1` checkpoint files.
//!
//! ```text
//! PROSO-CKPT v1
//! stage 2
//! config_hash <hex>
//! stage1_config_hash <hex>        (stage 2 only)
//! meta <json>
//! tensor <name> <d0,d1,..> <frozen 0|1>
//! <values>
//! ...
//! end
//! ```
//!
//! Values are written in Rust's shortest round-trip exponent form, so a
//! save/load cycle reproduces every tensor bit for bit.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{Ablation, ModelConfig};
use crate::encoder::{EncoderContext, EncoderSource, Vocabulary, WordEncoder};
use crate::error::{Error, Result};
use crate::model_d::{Dmpm, DmpmParams};
use crate::model_u::{Inventory, Normalization, Umpm};
use crate::nn::init::ParamRng;
use crate::nn::{BiLstm, Linear, Params};

const MAGIC: &str = "PROSO-CKPT v1";
pub const STAGE1_PREFIX: &str = "stage1";
pub const STAGE2_PREFIX: &str = "stage2";

#[derive(Debug, Clone, PartialEq)]
pub enum Checkpoint {
    Stage1(Umpm),
    Stage2(Dmpm),
}

impl Checkpoint {
    pub fn stage(&self) -> u8 {
        match self {
            Checkpoint::Stage1(_) => 1,
            Checkpoint::Stage2(_) => 2,
        }
    }

    pub fn utterance_model(&self) -> &Umpm {
        match self {
            Checkpoint::Stage1(m) => m,
            Checkpoint::Stage2(d) => &d.stage1,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        write_checkpoint(self, &mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)
            .map_err(|e| Error::Checkpoint(format!("cannot open {}: {e}", path.display())))?;
        read_checkpoint(std::io::BufReader::new(file))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct EncoderMeta {
    source: EncoderSource,
    context: EncoderContext,
    trainable: bool,
    lr_override: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Meta {
    model: ModelConfig,
    ablation: Ablation,
    inventory: Inventory,
    vocabulary: Vec<String>,
    encoder: EncoderMeta,
    normalization: Normalization,
}

fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of everything that fixes the utterance model's architecture and
/// input space: widths, ablations, phoneme/speaker/style inventory and the
/// encoder vocabulary.
pub fn config_hash(
    model: &ModelConfig,
    ablation: &Ablation,
    inventory: &Inventory,
    vocabulary: &Vocabulary,
) -> String {
    let value = serde_json::json!({
        "model": model,
        "ablation": ablation,
        "inventory": inventory,
        "vocabulary": vocabulary.tokens(),
    });
    // `Value` serialises objects with sorted keys
    sha_hex(value.to_string().as_bytes())
}

pub fn umpm_config_hash(m: &Umpm) -> String {
    config_hash(
        &m.config,
        &m.ablation,
        &m.inventory,
        &m.params.encoder.vocabulary,
    )
}

fn stage2_config_hash(stage1_hash: &str) -> String {
    sha_hex(format!("stage2:{stage1_hash}").as_bytes())
}

fn meta_of(m: &Umpm) -> Meta {
    let enc = &m.params.encoder;
    Meta {
        model: m.config.clone(),
        ablation: m.ablation,
        inventory: m.inventory.clone(),
        vocabulary: enc.vocabulary.tokens().to_vec(),
        encoder: EncoderMeta {
            source: enc.source,
            context: enc.context,
            trainable: enc.trainable,
            lr_override: enc.lr_override,
        },
        normalization: m.norm,
    }
}

fn write_tensor<W: Write>(
    w: &mut W,
    name: &str,
    shape: &[usize],
    values: &[f64],
    frozen: bool,
) -> Result<()> {
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{name} holds {v}")));
    }
    let dims: Vec<String> = shape.iter().map(usize::to_string).collect();
    writeln!(w, "tensor {name} {} {}", dims.join(","), u8::from(frozen))?;
    let vals: Vec<String> = values.iter().map(|v| format!("{v:e}")).collect();
    writeln!(w, "{}", vals.join(" "))?;
    Ok(())
}

pub fn write_checkpoint<W: Write>(ckpt: &Checkpoint, mut w: W) -> Result<()> {
    let um = ckpt.utterance_model();
    let s1_hash = umpm_config_hash(um);
    writeln!(w, "{MAGIC}")?;
    writeln!(w, "stage {}", ckpt.stage())?;
    match ckpt {
        Checkpoint::Stage1(_) => writeln!(w, "config_hash {s1_hash}")?,
        Checkpoint::Stage2(_) => {
            writeln!(w, "config_hash {}", stage2_config_hash(&s1_hash))?;
            writeln!(w, "stage1_config_hash {s1_hash}")?;
        }
    }
    let meta = serde_json::to_value(meta_of(um))?;
    writeln!(w, "meta {meta}")?;
    let frozen1 = ckpt.stage() == 2;
    let mut result = Ok(());
    um.params
        .visit_state(STAGE1_PREFIX, &mut |name, shape, values| {
            if result.is_ok() {
                result = write_tensor(&mut w, name, shape, values, frozen1);
            }
        });
    result?;
    if let Checkpoint::Stage2(d) = ckpt {
        let mut result = Ok(());
        d.params.visit(STAGE2_PREFIX, &mut |name, shape, values| {
            if result.is_ok() {
                result = write_tensor(&mut w, name, shape, values, false);
            }
        });
        result?;
    }
    writeln!(w, "end")?;
    Ok(())
}

struct Loaded {
    shape: Vec<usize>,
    values: Vec<f64>,
    frozen: bool,
}

fn skeleton_encoder(meta: &Meta) -> WordEncoder {
    let vocabulary = Vocabulary::new(meta.vocabulary.iter().skip(1).cloned());
    let (d, r) = (meta.model.d, meta.model.r);
    let toy = meta.encoder.source == EncoderSource::Toy;
    WordEncoder {
        source: meta.encoder.source,
        context: meta.encoder.context,
        trainable: meta.encoder.trainable,
        lr_override: meta.encoder.lr_override,
        embedding: Array2::zeros((vocabulary.len(), d)),
        rnn: (toy && meta.encoder.context == EncoderContext::Recurrent)
            .then(|| BiLstm::zeros(d, d / 2)),
        pool: toy.then(|| Linear::zeros(d, r)),
        vocabulary,
    }
}

fn fill(
    tensors: &mut BTreeMap<String, Loaded>,
    visit: &mut dyn FnMut(&mut dyn FnMut(&str, &[usize], &[f64])),
    visit_mut: &mut dyn FnMut(&mut dyn FnMut(&str, &mut [f64])),
    expect_frozen: bool,
) -> Result<()> {
    let mut problem = None;
    visit(&mut |name, shape, _| {
        if problem.is_some() {
            return;
        }
        match tensors.get(name) {
            None => problem = Some(format!("missing tensor {name}")),
            Some(t) if t.shape != shape => {
                problem = Some(format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    t.shape
                ))
            }
            Some(t) if t.frozen != expect_frozen => {
                problem = Some(format!("tensor {name} has the wrong frozen flag"))
            }
            Some(_) => {}
        }
    });
    if let Some(p) = problem {
        return Err(Error::Checkpoint(p));
    }
    visit_mut(&mut |name, values| {
        let t = tensors.remove(name).expect("checked above");
        values.copy_from_slice(&t.values);
    });
    Ok(())
}

fn expect_line<R: BufRead>(
    lines: &mut std::io::Lines<R>,
    key: &str,
    line_no: &mut usize,
) -> Result<String> {
    *line_no += 1;
    let line = lines
        .next()
        .ok_or_else(|| Error::Checkpoint(format!("truncated before `{key}`")))??;
    line.strip_prefix(key)
        .and_then(|rest| rest.strip_prefix(' '))
        .map(str::to_string)
        .ok_or_else(|| Error::Checkpoint(format!("line {line_no}: expected `{key}`")))
}

pub fn read_checkpoint<R: BufRead>(reader: R) -> Result<Checkpoint> {
    let mut lines = reader.lines();
    let mut line_no = 1;
    let magic = lines
        .next()
        .ok_or_else(|| Error::Checkpoint("empty file".into()))??;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!("bad header `{magic}`")));
    }
    let stage: u8 = expect_line(&mut lines, "stage", &mut line_no)?
        .parse()
        .map_err(|_| Error::Checkpoint("bad stage tag".into()))?;
    if stage != 1 && stage != 2 {
        return Err(Error::Checkpoint(format!("unsupported stage {stage}")));
    }
    let stored_hash = expect_line(&mut lines, "config_hash", &mut line_no)?;
    let stage1_hash = if stage == 2 {
        Some(expect_line(&mut lines, "stage1_config_hash", &mut line_no)?)
    } else {
        None
    };
    let meta: Meta = serde_json::from_str(&expect_line(&mut lines, "meta", &mut line_no)?)?;

    let mut tensors = BTreeMap::new();
    loop {
        line_no += 1;
        let line = lines
            .next()
            .ok_or_else(|| Error::Checkpoint("missing `end`".into()))??;
        if line == "end" {
            break;
        }
        let head: Vec<&str> = line.split(' ').collect();
        let [tag, name, dims, frozen] = head[..] else {
            return Err(Error::Checkpoint(format!(
                "line {line_no}: malformed tensor header"
            )));
        };
        if tag != "tensor" {
            return Err(Error::Checkpoint(format!(
                "line {line_no}: expected `tensor`"
            )));
        }
        let shape: Vec<usize> = if dims.is_empty() {
            Vec::new()
        } else {
            dims.split(',')
                .map(|d| {
                    d.parse()
                        .map_err(|_| Error::Checkpoint(format!("line {line_no}: bad shape")))
                })
                .collect::<Result<_>>()?
        };
        line_no += 1;
        let body = lines
            .next()
            .ok_or_else(|| Error::Checkpoint(format!("tensor {name} has no values")))??;
        let values: Vec<f64> = body
            .split_whitespace()
            .map(|v| {
                v.parse()
                    .map_err(|_| Error::Checkpoint(format!("line {line_no}: bad value `{v}`")))
            })
            .collect::<Result<_>>()?;
        if values.len() != shape.iter().product::<usize>() {
            return Err(Error::Checkpoint(format!(
                "tensor {name}: value count does not match shape"
            )));
        }
        tensors.insert(
            name.to_string(),
            Loaded {
                shape,
                values,
                frozen: frozen == "1",
            },
        );
    }

    let skeleton_cfg = ModelConfig {
        encoder_adapter: None,
        ..meta.model.clone()
    };
    let mut rng = <ParamRng as rand::SeedableRng>::seed_from_u64(0);
    let mut um = Umpm::new(
        &skeleton_cfg,
        meta.ablation,
        meta.inventory.clone(),
        Vocabulary::new(std::iter::empty()),
        &mut rng,
    )?;
    um.params.encoder = skeleton_encoder(&meta);
    um.config = meta.model.clone();
    um.norm = meta.normalization;
    {
        let params = std::cell::RefCell::new(&mut um.params);
        fill(
            &mut tensors,
            &mut |f| params.borrow().visit_state(STAGE1_PREFIX, f),
            &mut |f| params.borrow_mut().visit_state_mut(STAGE1_PREFIX, f),
            stage == 2,
        )?;
    }
    let um = Umpm::from_parts(um.config, um.ablation, um.inventory, um.norm, um.params)?;
    let s1_hash = umpm_config_hash(&um);

    let ckpt = if stage == 1 {
        if stored_hash != s1_hash {
            return Err(Error::Checkpoint(
                "config hash does not match contents".into(),
            ));
        }
        Checkpoint::Stage1(um)
    } else {
        if stage1_hash.as_deref() != Some(s1_hash.as_str())
            || stored_hash != stage2_config_hash(&s1_hash)
        {
            return Err(Error::Checkpoint(
                "config hash does not match contents".into(),
            ));
        }
        let mut params = DmpmParams::init(&um.config, um.inventory.num_styles, &mut rng)?;
        {
            let p = std::cell::RefCell::new(&mut params);
            fill(
                &mut tensors,
                &mut |f| p.borrow().visit(STAGE2_PREFIX, f),
                &mut |f| p.borrow_mut().visit_mut(STAGE2_PREFIX, f),
                false,
            )?;
        }
        Checkpoint::Stage2(Dmpm::from_parts(um, params)?)
    };
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
    }
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{tokenize_and_separate, Discourse, PinyinEntry};
    use rand::SeedableRng;

    fn model() -> Umpm {
        let lex = [
            PinyinEntry::new("甲", &["p0", "p1"], 2),
            PinyinEntry::new("甲", &["p0", "p1"], 2),
        ];
        let u = tokenize_and_separate("甲甲", &lex).unwrap();
        let d = Discourse {
            id: "d".into(),
            utterances: vec![u],
            style_label: 1,
        };
        let cfg = ModelConfig {
            d: 4,
            r: 4,
            attention_dim: 2,
            classifier_hidden: 2,
            ..ModelConfig::default()
        };
        Umpm::new(
            &cfg,
            Ablation::default(),
            Inventory::from_corpus(std::slice::from_ref(&d)),
            Vocabulary::from_corpus(&[d]),
            &mut ParamRng::seed_from_u64(3),
        )
        .unwrap()
    }

    fn round_trip(c: &Checkpoint) -> (Checkpoint, Vec<u8>) {
        let mut buf = Vec::new();
        write_checkpoint(c, &mut buf).unwrap();
        (read_checkpoint(buf.as_slice()).unwrap(), buf)
    }

    #[test]
    fn stage1_round_trip_is_exact() {
        let mut m = model();
        m.norm.pitch_mean = 0.1 + 0.2;
        let c = Checkpoint::Stage1(m);
        let (back, bytes) = round_trip(&c);
        assert_eq!(back, c);
        let mut again = Vec::new();
        write_checkpoint(&back, &mut again).unwrap();
        assert_eq!(again, bytes);
    }

    #[test]
    fn stage2_marks_stage1_frozen() {
        let d = Dmpm::new(model(), &mut ParamRng::seed_from_u64(9)).unwrap();
        let c = Checkpoint::Stage2(d);
        let (back, bytes) = round_trip(&c);
        assert_eq!(back, c);
        let text = String::from_utf8(bytes).unwrap();
        assert!(text.lines().any(|l| l.starts_with("stage1_config_hash ")));
        for l in text.lines().filter(|l| l.starts_with("tensor ")) {
            let frozen = l.ends_with(" 1");
            assert_eq!(frozen, l.starts_with("tensor stage1."), "{l}");
        }
    }

    #[test]
    fn tampering_is_detected() {
        let c = Checkpoint::Stage1(model());
        let mut buf = Vec::new();
        write_checkpoint(&c, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let bad = text.replacen("\"num_styles\":2", "\"num_styles\":3", 1);
        assert!(read_checkpoint(bad.as_bytes()).is_err());
        let truncated: String = text.lines().take(8).map(|l| format!("{l}\n")).collect();
        assert!(read_checkpoint(truncated.as_bytes()).is_err());
        assert!(read_checkpoint("PROSO-CKPT v2\n".as_bytes()).is_err());
    }
}
