//! Word-level text encoder.
//!
//! The encoder reads the lexical and punctuation words of an utterance
//! (separators are not encoder tokens) and returns one `d`-vector per token
//! plus an `r`-vector summarising the utterance. The default is a small
//! trainable toy model; [`load_pretrained_adapter`] is the seam for vectors
//! produced by an external language model.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::PathBuf;

use ndarray::{s, Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::corpus::{Discourse, Utterance, WordKind};
use crate::error::{Error, Result};
use crate::nn::init::{uniform2, ParamRng, UNIFORM_SCALE};
use crate::nn::{join, BiLstm, BiLstmTrace, Linear, Params};

pub const UNK: &str = "<unk>";

/// Token ↔ id mapping; id 0 is always [`UNK`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new<I: IntoIterator<Item = String>>(tokens: I) -> Self {
        let mut v = Self {
            tokens: vec![UNK.to_string()],
            index: HashMap::from([(UNK.to_string(), 0)]),
        };
        for t in tokens {
            if !v.index.contains_key(&t) {
                v.index.insert(t.clone(), v.tokens.len());
                v.tokens.push(t);
            }
        }
        v
    }

    /// Sorted set of every lexical and punctuation surface in the corpus.
    pub fn from_corpus(discourses: &[Discourse]) -> Self {
        let mut set = std::collections::BTreeSet::new();
        for d in discourses {
            for u in &d.utterances {
                set.extend(encoder_tokens(u).into_iter().map(str::to_string));
            }
        }
        Self::new(set)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(0)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line; the line number is the id.
    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        for t in &self.tokens {
            writeln!(w, "{t}")?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(r: R) -> Result<Self> {
        let mut tokens = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if i == 0 {
                if line != UNK {
                    return Err(Error::parse(1, format!("vocabulary must start with {UNK}")));
                }
                continue;
            }
            tokens.push(line);
        }
        let v = Self::new(tokens);
        Ok(v)
    }
}

/// The encoder's input tokens: every non-separator word, in order.
pub fn encoder_tokens(utt: &Utterance) -> Vec<&str> {
    utt.words
        .iter()
        .filter(|w| w.kind != WordKind::Separator)
        .map(|w| w.surface.as_str())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EncoderContext {
    /// Context-free embeddings, utterance vector from their mean.
    Bag,
    /// Embeddings plus a bidirectional LSTM; utterance vector from the final
    /// states of both directions.
    #[default]
    Recurrent,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub vocabulary: Vocabulary,
    pub d: usize,
    pub r: usize,
    pub context: EncoderContext,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.r == 0 {
            return Err(Error::Config(
                "encoder widths d and r must be positive".into(),
            ));
        }
        if self.context == EncoderContext::Recurrent && !self.d.is_multiple_of(2) {
            return Err(Error::Config("recurrent encoder needs an even d".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderSource {
    Toy,
    Precomputed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WordEncoding {
    /// One row per encoder token.
    pub word_vectors: Array2<f64>,
    pub utterance_vector: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct EncoderTrace {
    ids: Vec<usize>,
    rnn: Option<(Array2<f64>, BiLstmTrace)>,
    pool_input: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WordEncoder {
    pub source: EncoderSource,
    pub vocabulary: Vocabulary,
    pub context: EncoderContext,
    pub trainable: bool,
    pub lr_override: Option<f64>,
    /// `|V| × d`
    pub embedding: Array2<f64>,
    pub rnn: Option<BiLstm>,
    /// `None` means the utterance vector is the unprojected mean (`r = d`).
    pub pool: Option<Linear>,
}

impl WordEncoder {
    pub fn toy(config: &EncoderConfig, rng: &mut ParamRng) -> Result<Self> {
        config.validate()?;
        let (d, r) = (config.d, config.r);
        let embedding = uniform2(config.vocabulary.len(), d, UNIFORM_SCALE, rng);
        let rnn = match config.context {
            EncoderContext::Bag => None,
            EncoderContext::Recurrent => Some(BiLstm::init(d, d / 2, rng)),
        };
        Ok(Self {
            source: EncoderSource::Toy,
            vocabulary: config.vocabulary.clone(),
            context: config.context,
            trainable: true,
            lr_override: None,
            embedding,
            rnn,
            pool: Some(Linear::init(d, r, rng)),
        })
    }

    pub fn toy_zeros(config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let (d, r) = (config.d, config.r);
        Ok(Self {
            source: EncoderSource::Toy,
            vocabulary: config.vocabulary.clone(),
            context: config.context,
            trainable: true,
            lr_override: None,
            embedding: Array2::zeros((config.vocabulary.len(), d)),
            rnn: (config.context == EncoderContext::Recurrent).then(|| BiLstm::zeros(d, d / 2)),
            pool: Some(Linear::zeros(d, r)),
        })
    }

    pub fn d(&self) -> usize {
        self.embedding.ncols()
    }

    pub fn r(&self) -> usize {
        self.pool.as_ref().map_or(self.d(), Linear::output_dim)
    }

    pub fn token_ids(&self, utt: &Utterance) -> Vec<usize> {
        encoder_tokens(utt)
            .into_iter()
            .map(|t| self.vocabulary.id(t))
            .collect()
    }

    pub fn encode(&self, utt: &Utterance) -> Result<WordEncoding> {
        Ok(self.encode_traced(&self.token_ids(utt))?.0)
    }

    pub fn encode_traced(&self, ids: &[usize]) -> Result<(WordEncoding, EncoderTrace)> {
        if ids.is_empty() {
            return Err(Error::Validation("cannot encode an empty utterance".into()));
        }
        let d = self.d();
        let mut emb = Array2::zeros((ids.len(), d));
        for (row, &id) in ids.iter().enumerate() {
            emb.row_mut(row).assign(&self.embedding.row(id));
        }
        let (word_vectors, rnn, summary) = match &self.rnn {
            Some(rnn) => {
                let (ctx, tr) = rnn.forward(&emb);
                let h = d / 2;
                let mut summary = Array1::zeros(d);
                summary.slice_mut(s![..h]).assign(&tr.fwd.final_hidden());
                summary.slice_mut(s![h..]).assign(&tr.bwd.final_hidden());
                (&emb + &ctx, Some((emb, tr)), summary)
            }
            None => {
                let mean = emb.mean_axis(ndarray::Axis(0)).expect("non-empty");
                (emb, None, mean)
            }
        };
        let pool_input = summary.insert_axis(ndarray::Axis(0));
        let utterance_vector = match &self.pool {
            Some(p) => p.forward(&pool_input).row(0).to_owned(),
            None => pool_input.row(0).to_owned(),
        };
        Ok((
            WordEncoding {
                word_vectors,
                utterance_vector,
            },
            EncoderTrace {
                ids: ids.to_vec(),
                rnn,
                pool_input,
            },
        ))
    }

    /// Accumulates parameter gradients given `dL/d word_vectors` and
    /// `dL/d utterance_vector`.
    pub fn backward(
        &self,
        tr: &EncoderTrace,
        d_words: &Array2<f64>,
        d_utt: &Array1<f64>,
        grad: &mut WordEncoder,
    ) {
        let d = self.d();
        let n = tr.ids.len();
        let d_utt_row = d_utt.view().insert_axis(ndarray::Axis(0)).to_owned();
        let d_summary = match (&self.pool, grad.pool.as_mut()) {
            (Some(p), Some(gp)) => p.backward(&tr.pool_input, &d_utt_row, gp),
            _ => d_utt_row,
        };
        let d_summary = d_summary.row(0).to_owned();
        let mut d_emb = d_words.clone();
        match (&self.rnn, &tr.rnn, grad.rnn.as_mut()) {
            (Some(rnn), Some((emb, rtr)), Some(grnn)) => {
                let h = d / 2;
                let mut d_ctx = d_words.clone();
                if let Some(t) = rtr.fwd.final_position() {
                    let mut row = d_ctx.slice_mut(s![t, ..h]);
                    row += &d_summary.slice(s![..h]);
                }
                if let Some(t) = rtr.bwd.final_position() {
                    let mut row = d_ctx.slice_mut(s![t, h..]);
                    row += &d_summary.slice(s![h..]);
                }
                let _ = emb;
                d_emb += &rnn.backward(rtr, &d_ctx, grnn);
            }
            _ => {
                for mut row in d_emb.rows_mut() {
                    row.scaled_add(1.0 / n as f64, &d_summary);
                }
            }
        }
        for (row, &id) in tr.ids.iter().enumerate() {
            let mut g = grad.embedding.row_mut(id);
            g += &d_emb.row(row);
        }
    }

    /// Every tensor, trainable or not; used for checkpoints.
    pub fn visit_all(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.embedding.visit(&join(prefix, "embedding"), f);
        if let Some(rnn) = &self.rnn {
            rnn.visit(&join(prefix, "rnn"), f);
        }
        if let Some(pool) = &self.pool {
            pool.visit(&join(prefix, "pool"), f);
        }
    }

    pub fn visit_all_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.embedding.visit_mut(&join(prefix, "embedding"), f);
        if let Some(rnn) = &mut self.rnn {
            rnn.visit_mut(&join(prefix, "rnn"), f);
        }
        if let Some(pool) = &mut self.pool {
            pool.visit_mut(&join(prefix, "pool"), f);
        }
    }
}

/// Only trainable tensors are visible to optimisers.
impl Params for WordEncoder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        if self.trainable {
            self.visit_all(prefix, f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        if self.trainable {
            self.visit_all_mut(prefix, f);
        }
    }
}

/// Checks an encoding against the `(n, d)` / `r` contract.
pub fn validate_encoding(enc: &WordEncoding, n: usize, d: usize, r: usize) -> Result<()> {
    if enc.word_vectors.dim() != (n, d) {
        return Err(Error::Shape(format!(
            "encoder returned {:?} word vectors, expected ({n}, {d})",
            enc.word_vectors.dim()
        )));
    }
    if enc.utterance_vector.len() != r {
        return Err(Error::Shape(format!(
            "encoder returned a {}-dim utterance vector, expected {r}",
            enc.utterance_vector.len()
        )));
    }
    if enc
        .word_vectors
        .iter()
        .chain(&enc.utterance_vector)
        .any(|v| !v.is_finite())
    {
        return Err(Error::NonFinite("encoder output".into()));
    }
    Ok(())
}

/// Config-file table describing an external encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterSpec {
    pub provider: String,
    pub model_id: String,
    #[serde(default)]
    pub trainable: bool,
    #[serde(default)]
    pub learning_rate: Option<f64>,
}

/// Builds the encoder named by `spec`, or the toy encoder when `spec` is
/// `None`.
///
/// The only bundled provider is `precomputed`: `model_id` is the path of a
/// text table with one `<token> <v1> … <vd>` row per token, typically
/// exported from a pretrained model. Its utterance vector is the mean word
/// vector, so `r` must equal `d`.
pub fn load_pretrained_adapter(
    spec: Option<&AdapterSpec>,
    config: &EncoderConfig,
    rng: &mut ParamRng,
) -> Result<WordEncoder> {
    let Some(spec) = spec else {
        return WordEncoder::toy(config, rng);
    };
    match spec.provider.as_str() {
        "precomputed" => {
            let path = PathBuf::from(&spec.model_id);
            let file = std::fs::File::open(&path).map_err(|e| {
                Error::Capability(format!("cannot open vector table {}: {e}", path.display()))
            })?;
            let mut enc = read_vector_table(std::io::BufReader::new(file), config.d)?;
            if config.r != config.d {
                return Err(Error::Config(format!(
                    "precomputed encoder needs r = d, got r = {} and d = {}",
                    config.r, config.d
                )));
            }
            enc.trainable = spec.trainable;
            enc.lr_override = spec.learning_rate;
            Ok(enc)
        }
        other => Err(Error::Capability(format!(
            "encoder provider `{other}` is not available in this build (model `{}`)",
            spec.model_id
        ))),
    }
}

/// Parses a `<token> <v1> … <vd>` table into a bag encoder without a
/// projection. Unknown tokens map to a zero row.
pub fn read_vector_table<R: BufRead>(reader: R, d: usize) -> Result<WordEncoder> {
    let mut tokens = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        let token = fields.next().expect("non-empty line").to_string();
        let values: Vec<f64> = fields
            .map(|v| {
                v.parse()
                    .map_err(|_| Error::parse(i + 1, format!("bad number `{v}`")))
            })
            .collect::<Result<_>>()?;
        if values.len() != d {
            return Err(Error::parse(
                i + 1,
                format!("expected {d} values, found {}", values.len()),
            ));
        }
        tokens.push(token);
        rows.push(values);
    }
    let vocabulary = Vocabulary::new(tokens.iter().cloned());
    let mut embedding = Array2::zeros((vocabulary.len(), d));
    for (t, row) in tokens.iter().zip(&rows) {
        let id = vocabulary.id(t);
        embedding.row_mut(id).assign(&Array1::from(row.clone()));
    }
    Ok(WordEncoder {
        source: EncoderSource::Precomputed,
        vocabulary,
        context: EncoderContext::Bag,
        trainable: false,
        lr_override: None,
        embedding,
        rnn: None,
        pool: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{tokenize_and_separate, PinyinEntry};
    use rand::SeedableRng;

    fn utt(text: &str, words: &[&str]) -> Utterance {
        let entries: Vec<_> = words
            .iter()
            .map(|w| PinyinEntry::new(w, &["a"], 1))
            .collect();
        tokenize_and_separate(text, &entries).unwrap()
    }

    fn config(context: EncoderContext) -> EncoderConfig {
        EncoderConfig {
            vocabulary: Vocabulary::new(["甲", "乙", "，"].map(String::from)),
            d: 4,
            r: 3,
            context,
        }
    }

    #[test]
    fn zero_params_zero_vectors() {
        for ctx in [EncoderContext::Bag, EncoderContext::Recurrent] {
            let enc = WordEncoder::toy_zeros(&config(ctx)).unwrap();
            let out = enc.encode(&utt("甲", &["甲"])).unwrap();
            assert_eq!(out.word_vectors.dim(), (1, 4));
            assert!(out.word_vectors.iter().all(|v| *v == 0.0));
            assert!(out.utterance_vector.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn separators_are_not_tokens() {
        let u = utt("甲乙，甲", &["甲", "乙", "甲"]);
        assert_eq!(encoder_tokens(&u), ["甲", "乙", "，", "甲"]);
        let enc = WordEncoder::toy(
            &config(EncoderContext::Recurrent),
            &mut ParamRng::seed_from_u64(0),
        )
        .unwrap();
        let out = enc.encode(&u).unwrap();
        validate_encoding(&out, 4, 4, 3).unwrap();
        assert!(validate_encoding(&out, 3, 4, 3).is_err());
    }

    #[test]
    fn unknown_maps_to_unk_and_empty_fails() {
        let cfg = config(EncoderContext::Bag);
        assert_eq!(cfg.vocabulary.id("丙"), 0);
        let enc = WordEncoder::toy(&cfg, &mut ParamRng::seed_from_u64(0)).unwrap();
        assert!(enc.encode_traced(&[]).is_err());
    }

    #[test]
    fn vocabulary_file_round_trip() {
        let v = config(EncoderContext::Bag).vocabulary;
        let mut buf = Vec::new();
        v.write(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf.clone()).unwrap(),
            "<unk>\n甲\n乙\n，\n"
        );
        assert_eq!(Vocabulary::read(buf.as_slice()).unwrap(), v);
    }

    #[test]
    fn adapter_paths() {
        let cfg = config(EncoderContext::Recurrent);
        let mut rng = ParamRng::seed_from_u64(0);
        let toy = load_pretrained_adapter(None, &cfg, &mut rng).unwrap();
        assert_eq!(toy.source, EncoderSource::Toy);
        let spec = AdapterSpec {
            provider: "roberta-service".into(),
            model_id: "chinese-roberta-wwm-ext".into(),
            trainable: true,
            learning_rate: Some(1e-5),
        };
        assert!(matches!(
            load_pretrained_adapter(Some(&spec), &cfg, &mut rng),
            Err(Error::Capability(_))
        ));
    }

    #[test]
    fn vector_table_encoder() {
        let table = "甲 1 0\n乙 0 1\n";
        let enc = read_vector_table(table.as_bytes(), 2).unwrap();
        let out = enc.encode(&utt("甲乙丙", &["甲", "乙", "丙"])).unwrap();
        assert_eq!(out.word_vectors.row(2).to_vec(), [0.0, 0.0]);
        assert!((out.utterance_vector[0] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(crate::nn::num_params(&enc), 0);
        assert!(read_vector_table("甲 1\n".as_bytes(), 2).is_err());
    }
}
