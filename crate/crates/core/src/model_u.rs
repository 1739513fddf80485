//! Utterance-level prosody model.
//!
//! Word vectors (plus a dialogue offset) are expanded to phoneme length,
//! summed with phoneme, tone and speaker embeddings, and fed to two stacked
//! bidirectional LSTM predictors: one for pitch/energy and one for the
//! 3-dim local prosody embedding (LPE), which also sees pitch and energy.
//! A small MLP classifies the utterance style from the utterance vector.

use std::collections::{BTreeSet, HashMap};

use ndarray::{s, Array1, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::config::{Ablation, ModelConfig, Stage1Config};
use crate::corpus::{
    assign_tone_labels, Discourse, Utterance, WordKind, WordToken, SEPARATOR, TONE_CLASSES,
};
use crate::encoder::{
    load_pretrained_adapter, EncoderConfig, EncoderTrace, Vocabulary, WordEncoder,
};
use crate::error::{Error, Result};
use crate::features::{Lpe, PhonemeTargets, LPE_DIM};
use crate::nn::init::{uniform2, ParamRng, UNIFORM_SCALE};
use crate::nn::{
    join, log_sum_exp, softmax, Linear, Mlp, MlpTrace, Params, StackedBiLstm, StackedBiLstmTrace,
};

/// Symbols, speakers and styles the model was built for.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Inventory {
    pub phonemes: Vec<String>,
    pub num_speakers: usize,
    pub num_styles: usize,
}

impl Inventory {
    /// Sorted phoneme alphabet (always containing the separator), speaker
    /// and style counts from the largest ids seen; at least two styles.
    pub fn from_corpus(discourses: &[Discourse]) -> Self {
        let mut phonemes = BTreeSet::from([SEPARATOR.to_string()]);
        let mut speakers = 0;
        let mut styles = 2;
        for d in discourses {
            styles = styles.max(d.style_label + 1);
            for u in &d.utterances {
                speakers = speakers.max(u.speaker_id + 1);
                styles = styles.max(u.style_label + 1);
                phonemes.extend(u.phonemes().map(|p| p.symbol.clone()));
            }
        }
        Self {
            phonemes: phonemes.into_iter().collect(),
            num_speakers: speakers.max(1),
            num_styles: styles,
        }
    }
}

/// Affine map between physical pitch/energy and the model's scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub pitch_mean: f64,
    pub pitch_std: f64,
    pub energy_mean: f64,
    pub energy_std: f64,
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            pitch_mean: 0.0,
            pitch_std: 1.0,
            energy_mean: 0.0,
            energy_std: 1.0,
        }
    }
}

impl Normalization {
    pub fn from_targets<'a>(targets: impl IntoIterator<Item = &'a PhonemeTargets>) -> Self {
        let (mut p, mut e) = (Vec::new(), Vec::new());
        for t in targets {
            p.extend_from_slice(&t.pitch);
            e.extend_from_slice(&t.energy);
        }
        let stats = |v: &[f64]| {
            if v.is_empty() {
                return (0.0, 1.0);
            }
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64;
            (mean, var.sqrt().max(1e-6))
        };
        let (pitch_mean, pitch_std) = stats(&p);
        let (energy_mean, energy_std) = stats(&e);
        Self {
            pitch_mean,
            pitch_std,
            energy_mean,
            energy_std,
        }
    }

    pub fn pitch_in(&self, v: f64) -> f64 {
        (v - self.pitch_mean) / self.pitch_std
    }

    pub fn energy_in(&self, v: f64) -> f64 {
        (v - self.energy_mean) / self.energy_std
    }

    pub fn pitch_out(&self, v: f64) -> f64 {
        v * self.pitch_std + self.pitch_mean
    }

    pub fn energy_out(&self, v: f64) -> f64 {
        v * self.energy_std + self.energy_mean
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UmpmParams {
    pub encoder: WordEncoder,
    /// Dialogue embedding, `2 × d`.
    pub e_dia: Array2<f64>,
    pub e_phn: Array2<f64>,
    pub e_tone: Array2<f64>,
    pub e_spk: Array2<f64>,
    pub pe_rnn: StackedBiLstm,
    pub pe_head: Linear,
    pub lpe_rnn: StackedBiLstm,
    pub lpe_head: Linear,
    pub style: Mlp,
}

impl UmpmParams {
    /// All tensors including a frozen encoder; used for checkpoints.
    pub fn visit_state(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.encoder.visit_all(&join(prefix, "encoder"), f);
        self.visit_rest(prefix, f);
    }

    pub fn visit_state_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.encoder.visit_all_mut(&join(prefix, "encoder"), f);
        self.visit_rest_mut(prefix, f);
    }

    fn visit_rest(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        crate::nn::params::visit_fields!(self, prefix, f;
            e_dia, e_phn, e_tone, e_spk, pe_rnn, pe_head, lpe_rnn, lpe_head, style);
    }

    fn visit_rest_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        crate::nn::params::visit_fields_mut!(self, prefix, f;
            e_dia, e_phn, e_tone, e_spk, pe_rnn, pe_head, lpe_rnn, lpe_head, style);
    }
}

impl Params for UmpmParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.encoder.visit(&join(prefix, "encoder"), f);
        self.visit_rest(prefix, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        self.visit_rest_mut(prefix, f);
    }
}

/// Model outputs on the model's internal pitch/energy scale.
#[derive(Debug, Clone, PartialEq)]
pub struct UmpmOutput {
    pub pitch_hat: Vec<f64>,
    pub energy_hat: Vec<f64>,
    pub lpe_hat: Vec<Lpe>,
    pub style_logits: Vec<f64>,
}

impl UmpmOutput {
    pub fn len(&self) -> usize {
        self.pitch_hat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pitch_hat.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Ground-truth pitch/energy feed the LPE predictor.
    Train,
    /// The model's own pitch/energy predictions feed the LPE predictor.
    Infer,
}

/// An utterance resolved to integer ids.
#[derive(Debug, Clone, PartialEq)]
pub struct UttInput {
    pub token_ids: Vec<usize>,
    pub token_flags: Vec<u8>,
    /// Encoder-token row feeding each phoneme position.
    pub row_map: Vec<usize>,
    pub phoneme_ids: Vec<usize>,
    pub tones: Vec<usize>,
    pub speaker: usize,
}

impl UttInput {
    pub fn len(&self) -> usize {
        self.row_map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.row_map.is_empty()
    }
}

/// A training example on the model scale.
#[derive(Debug, Clone, PartialEq)]
pub struct UttExample {
    pub input: UttInput,
    pub pitch: Vec<f64>,
    pub energy: Vec<f64>,
    pub lpe: Vec<Lpe>,
    pub style: usize,
    pub mask: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct UmpmTrace {
    enc: EncoderTrace,
    pe: StackedBiLstmTrace,
    pe_feat: Array2<f64>,
    lpe: StackedBiLstmTrace,
    lpe_feat: Array2<f64>,
    style: MlpTrace,
    teacher_forced: bool,
}

/// `E_w`: each encoder-token vector plus the dialogue row of its flag.
pub fn word_features(word_vectors: &Array2<f64>, flags: &[u8], e_dia: &Array2<f64>) -> Array2<f64> {
    let mut out = word_vectors.clone();
    for (mut row, &flag) in out.rows_mut().into_iter().zip(flags) {
        row += &e_dia.row(flag as usize);
    }
    out
}

/// For each phoneme position, the encoder-token row it copies.
///
/// Lexical word `i` (token row `t`) contributes `p_i` copies of row `t`;
/// a separator copies the row of the preceding lexical word; punctuation
/// contributes nothing.
pub fn length_regulation_map(words: &[WordToken]) -> Result<Vec<usize>> {
    let mut map = Vec::new();
    let mut token = 0;
    let mut last_lexical = None;
    for w in words {
        match w.kind {
            WordKind::Separator => {
                let row = last_lexical.ok_or_else(|| {
                    Error::Validation("separator without a preceding lexical word".into())
                })?;
                map.extend(std::iter::repeat_n(row, w.phoneme_len()));
            }
            WordKind::Lexical | WordKind::Punctuation => {
                map.extend(std::iter::repeat_n(token, w.phoneme_len()));
                if w.kind == WordKind::Lexical {
                    last_lexical = Some(token);
                }
                token += 1;
            }
        }
    }
    if map.is_empty() {
        return Err(Error::Validation("utterance has no phonemes".into()));
    }
    Ok(map)
}

/// `E_LR`: word features expanded to phoneme length.
pub fn length_regulate(word_feats: &Array2<f64>, words: &[WordToken]) -> Result<Array2<f64>> {
    let map = length_regulation_map(words)?;
    let tokens = words
        .iter()
        .filter(|w| w.kind != WordKind::Separator)
        .count();
    if word_feats.nrows() != tokens {
        return Err(Error::length(
            "word feature rows",
            tokens,
            word_feats.nrows(),
        ));
    }
    Ok(gather_rows(word_feats, &map))
}

fn gather_rows(table: &Array2<f64>, ids: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((ids.len(), table.ncols()));
    for (mut row, &id) in out.rows_mut().into_iter().zip(ids) {
        row.assign(&table.row(id));
    }
    out
}

fn scatter_rows(dst: &mut Array2<f64>, ids: &[usize], src: &Array2<f64>) {
    for (row, &id) in src.rows().into_iter().zip(ids) {
        let mut d = dst.row_mut(id);
        d += &row;
    }
}

/// `E_pf = E_LR + E_phn + E_tone + E_spk`, honouring the ablation switches.
pub fn fuse_phoneme_features(
    e_lr: &Array2<f64>,
    phoneme_ids: &[usize],
    tones: &[usize],
    speaker: usize,
    params: &UmpmParams,
    ablation: Ablation,
) -> Array2<f64> {
    let mut out = if ablation.no_word {
        Array2::zeros(e_lr.raw_dim())
    } else {
        e_lr.clone()
    };
    if !ablation.no_phn {
        out += &gather_rows(&params.e_phn, phoneme_ids);
        out += &gather_rows(&params.e_tone, tones);
    }
    out += &params.e_spk.row(speaker);
    out
}

fn head_columns(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.columns().into_iter().map(|c| c.to_vec()).collect()
}

/// Pitch and energy from the fused phoneme features.
pub fn predict_pitch_energy(e_pf: &Array2<f64>, params: &UmpmParams) -> (Vec<f64>, Vec<f64>) {
    let (feat, _) = params.pe_rnn.forward(e_pf);
    let mut cols = head_columns(&params.pe_head.forward(&feat));
    let energy = cols.pop().expect("two columns");
    let pitch = cols.pop().expect("two columns");
    (pitch, energy)
}

fn lpe_input(
    e_pf: &Array2<f64>,
    pitch: &[f64],
    energy: &[f64],
    ablation: Ablation,
) -> Result<Array2<f64>> {
    let n = e_pf.nrows();
    if pitch.len() != n {
        return Err(Error::length("pitch sequence", n, pitch.len()));
    }
    if energy.len() != n {
        return Err(Error::length("energy sequence", n, energy.len()));
    }
    if ablation.no_pe {
        return Ok(e_pf.clone());
    }
    let d = e_pf.ncols();
    let mut x = Array2::zeros((n, d + 2));
    x.slice_mut(s![.., ..d]).assign(e_pf);
    x.column_mut(d).assign(&Array1::from(pitch.to_vec()));
    x.column_mut(d + 1).assign(&Array1::from(energy.to_vec()));
    Ok(x)
}

fn rows_to_lpe(m: &Array2<f64>) -> Vec<Lpe> {
    m.rows().into_iter().map(|r| [r[0], r[1], r[2]]).collect()
}

/// LPE from `concat(E_pf, pitch, energy)`; the same weights serve the
/// teacher-forced and inference paths.
pub fn predict_lpe(
    e_pf: &Array2<f64>,
    pitch: &[f64],
    energy: &[f64],
    params: &UmpmParams,
    ablation: Ablation,
) -> Result<Vec<Lpe>> {
    let x = lpe_input(e_pf, pitch, energy, ablation)?;
    let (feat, _) = params.lpe_rnn.forward(&x);
    Ok(rows_to_lpe(&params.lpe_head.forward(&feat)))
}

pub fn classify_style(utterance_vector: &Array1<f64>, params: &UmpmParams) -> Vec<f64> {
    let x = utterance_vector.view().insert_axis(Axis(0)).to_owned();
    params.style.forward(&x).0.row(0).to_vec()
}

/// The utterance-level model with its metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Umpm {
    pub config: ModelConfig,
    pub ablation: Ablation,
    pub inventory: Inventory,
    pub norm: Normalization,
    pub params: UmpmParams,
    phoneme_index: HashMap<String, usize>,
}

impl Umpm {
    /// Randomly initialised model; the encoder comes from the configured
    /// adapter (toy by default).
    pub fn new(
        config: &ModelConfig,
        ablation: Ablation,
        inventory: Inventory,
        vocabulary: Vocabulary,
        rng: &mut ParamRng,
    ) -> Result<Self> {
        config.validate()?;
        let enc_cfg = EncoderConfig {
            vocabulary,
            d: config.d,
            r: config.r,
            context: config.context,
        };
        let encoder = load_pretrained_adapter(config.encoder_adapter.as_ref(), &enc_cfg, rng)?;
        let d = config.d;
        let h = config.predictor_hidden();
        let layers = config.predictor_layers;
        let lpe_in = if ablation.no_pe { d } else { d + 2 };
        let e_dia = uniform2(2, d, UNIFORM_SCALE, rng);
        let e_phn = uniform2(inventory.phonemes.len(), d, UNIFORM_SCALE, rng);
        let e_tone = uniform2(TONE_CLASSES, d, UNIFORM_SCALE, rng);
        let e_spk = uniform2(inventory.num_speakers, d, UNIFORM_SCALE, rng);
        let pe_rnn = StackedBiLstm::init(d, h, layers, rng);
        let pe_head = Linear::init(2 * h, 2, rng);
        let lpe_rnn = StackedBiLstm::init(lpe_in, h, layers, rng);
        let lpe_head = Linear::init(2 * h, LPE_DIM, rng);
        let style = Mlp::init(
            config.r,
            config.classifier_hidden,
            inventory.num_styles,
            rng,
        );
        let params = UmpmParams {
            encoder,
            e_dia,
            e_phn,
            e_tone,
            e_spk,
            pe_rnn,
            pe_head,
            lpe_rnn,
            lpe_head,
            style,
        };
        Self::from_parts(
            config.clone(),
            ablation,
            inventory,
            Normalization::default(),
            params,
        )
    }

    /// Same architecture as [`Umpm::new`] with every tensor zero.
    pub fn zeros(
        config: &ModelConfig,
        ablation: Ablation,
        inventory: Inventory,
        vocabulary: Vocabulary,
    ) -> Result<Self> {
        let mut m = Self::new(
            config,
            ablation,
            inventory,
            vocabulary,
            &mut <ParamRng as rand::SeedableRng>::seed_from_u64(0),
        )?;
        m.params.visit_state_mut("", &mut |_, v| v.fill(0.0));
        Ok(m)
    }

    pub fn from_parts(
        config: ModelConfig,
        ablation: Ablation,
        inventory: Inventory,
        norm: Normalization,
        params: UmpmParams,
    ) -> Result<Self> {
        let d = config.d;
        let checks = [
            ("encoder width", params.encoder.d(), d),
            ("utterance width", params.encoder.r(), config.r),
            ("dialogue rows", params.e_dia.nrows(), 2),
            ("dialogue width", params.e_dia.ncols(), d),
            (
                "phoneme table rows",
                params.e_phn.nrows(),
                inventory.phonemes.len(),
            ),
            ("tone table rows", params.e_tone.nrows(), TONE_CLASSES),
            (
                "speaker table rows",
                params.e_spk.nrows(),
                inventory.num_speakers,
            ),
            (
                "style classes",
                params.style.output_dim(),
                inventory.num_styles,
            ),
            (
                "lpe predictor input",
                params.lpe_rnn.input_dim(),
                if ablation.no_pe { d } else { d + 2 },
            ),
        ];
        for (what, actual, expected) in checks {
            if actual != expected {
                return Err(Error::Shape(format!(
                    "{what}: expected {expected}, found {actual}"
                )));
            }
        }
        let phoneme_index = inventory
            .phonemes
            .iter()
            .enumerate()
            .map(|(i, p)| (p.clone(), i))
            .collect();
        Ok(Self {
            config,
            ablation,
            inventory,
            norm,
            params,
            phoneme_index,
        })
    }

    pub fn d(&self) -> usize {
        self.config.d
    }

    pub fn r(&self) -> usize {
        self.config.r
    }

    pub fn prepare(&self, utt: &Utterance) -> Result<UttInput> {
        if utt.speaker_id >= self.inventory.num_speakers {
            return Err(Error::Unknown {
                what: "speaker id",
                value: utt.speaker_id.to_string(),
                known: format!("0..{}", self.inventory.num_speakers),
            });
        }
        let tones = assign_tone_labels(utt)?
            .into_iter()
            .map(usize::from)
            .collect();
        let phoneme_ids = utt
            .phonemes()
            .map(|p| {
                self.phoneme_index
                    .get(&p.symbol)
                    .copied()
                    .ok_or_else(|| Error::Unknown {
                        what: "phoneme symbol",
                        value: p.symbol.clone(),
                        known: self.inventory.phonemes.join(" "),
                    })
            })
            .collect::<Result<_>>()?;
        let token_flags = utt
            .words
            .iter()
            .filter(|w| w.kind != WordKind::Separator)
            .map(|w| w.dialogue_flag.min(1))
            .collect();
        Ok(UttInput {
            token_ids: self.params.encoder.token_ids(utt),
            token_flags,
            row_map: length_regulation_map(&utt.words)?,
            phoneme_ids,
            tones,
            speaker: utt.speaker_id,
        })
    }

    /// Builds a training example; targets are mapped to the model scale.
    pub fn example(&self, utt: &Utterance, targets: &PhonemeTargets) -> Result<UttExample> {
        let input = self.prepare(utt)?;
        targets.check_len(input.len())?;
        if utt.style_label >= self.inventory.num_styles {
            return Err(Error::Unknown {
                what: "style id",
                value: utt.style_label.to_string(),
                known: format!("0..{}", self.inventory.num_styles),
            });
        }
        Ok(UttExample {
            pitch: targets
                .pitch
                .iter()
                .map(|&v| self.norm.pitch_in(v))
                .collect(),
            energy: targets
                .energy
                .iter()
                .map(|&v| self.norm.energy_in(v))
                .collect(),
            lpe: targets.lpe.clone(),
            style: utt.style_label,
            mask: vec![true; input.len()],
            input,
        })
    }

    /// Forward pass on prepared input. With `teacher = Some((pitch,
    /// energy))` (model scale) the LPE predictor sees those values,
    /// otherwise it sees the model's own predictions.
    pub fn forward_input(
        &self,
        inp: &UttInput,
        teacher: Option<(&[f64], &[f64])>,
    ) -> Result<(UmpmOutput, UmpmTrace)> {
        let p = &self.params;
        let (enc, enc_trace) = p.encoder.encode_traced(&inp.token_ids)?;
        let words = word_features(&enc.word_vectors, &inp.token_flags, &p.e_dia);
        let e_lr = gather_rows(&words, &inp.row_map);
        let e_pf = fuse_phoneme_features(
            &e_lr,
            &inp.phoneme_ids,
            &inp.tones,
            inp.speaker,
            p,
            self.ablation,
        );

        let (pe_feat, pe) = p.pe_rnn.forward(&e_pf);
        let mut pe_cols = head_columns(&p.pe_head.forward(&pe_feat));
        let energy_hat = pe_cols.pop().expect("two columns");
        let pitch_hat = pe_cols.pop().expect("two columns");

        let (pitch_in, energy_in) = teacher.unwrap_or((&pitch_hat, &energy_hat));
        let lpe_in = lpe_input(&e_pf, pitch_in, energy_in, self.ablation)?;
        let (lpe_feat, lpe) = p.lpe_rnn.forward(&lpe_in);
        let lpe_hat = rows_to_lpe(&p.lpe_head.forward(&lpe_feat));

        let utt_vec = enc.utterance_vector.insert_axis(Axis(0));
        let (logits, style) = p.style.forward(&utt_vec);
        let out = UmpmOutput {
            pitch_hat,
            energy_hat,
            lpe_hat,
            style_logits: logits.row(0).to_vec(),
        };
        let trace = UmpmTrace {
            enc: enc_trace,
            pe,
            pe_feat,
            lpe,
            lpe_feat,
            style,
            teacher_forced: teacher.is_some(),
        };
        Ok((out, trace))
    }

    /// Forward pass in physical units. Train mode requires targets.
    pub fn forward(
        &self,
        utt: &Utterance,
        targets: Option<&PhonemeTargets>,
        mode: Mode,
    ) -> Result<UmpmOutput> {
        let inp = self.prepare(utt)?;
        let teacher = match (mode, targets) {
            (Mode::Train, None) => {
                return Err(Error::Validation("train mode needs phoneme targets".into()))
            }
            (Mode::Train, Some(t)) => {
                t.check_len(inp.len())?;
                Some((
                    t.pitch
                        .iter()
                        .map(|&v| self.norm.pitch_in(v))
                        .collect::<Vec<_>>(),
                    t.energy
                        .iter()
                        .map(|&v| self.norm.energy_in(v))
                        .collect::<Vec<_>>(),
                ))
            }
            (Mode::Infer, _) => None,
        };
        let tf = teacher.as_ref().map(|(p, e)| (p.as_slice(), e.as_slice()));
        let (mut out, _) = self.forward_input(&inp, tf)?;
        for v in &mut out.pitch_hat {
            *v = self.norm.pitch_out(*v);
        }
        for v in &mut out.energy_hat {
            *v = self.norm.energy_out(*v);
        }
        Ok(out)
    }

    /// Inference-path prediction as feature rows: `(exported, raw)` where
    /// the exported LPE is clamped to `[0, 1]`.
    pub fn predict_features(&self, utt: &Utterance) -> Result<(PhonemeTargets, PhonemeTargets)> {
        let out = self.forward(utt, None, Mode::Infer)?;
        Ok(output_to_features(&utt.id, &out))
    }

    /// Backpropagates output gradients (model scale) into `grad`.
    pub fn backward(
        &self,
        inp: &UttInput,
        tr: &UmpmTrace,
        d_out: &OutputGrads,
        grad: &mut UmpmParams,
    ) {
        let p = &self.params;
        let d = self.d();
        let n = inp.len();

        let d_lpe_feat = p
            .lpe_head
            .backward(&tr.lpe_feat, &d_out.lpe, &mut grad.lpe_head);
        let d_lpe_in = p.lpe_rnn.backward(&tr.lpe, &d_lpe_feat, &mut grad.lpe_rnn);
        let mut d_pe_out = Array2::zeros((n, 2));
        d_pe_out.column_mut(0).assign(&d_out.pitch);
        d_pe_out.column_mut(1).assign(&d_out.energy);
        if !self.ablation.no_pe && !tr.teacher_forced {
            let mut both = d_pe_out.slice_mut(s![.., 0..2]);
            both += &d_lpe_in.slice(s![.., d..d + 2]);
        }
        let d_pe_feat = p
            .pe_head
            .backward(&tr.pe_feat, &d_pe_out, &mut grad.pe_head);
        let mut d_epf = p.pe_rnn.backward(&tr.pe, &d_pe_feat, &mut grad.pe_rnn);
        d_epf += &d_lpe_in.slice(s![.., ..d]);

        let mut spk = grad.e_spk.row_mut(inp.speaker);
        spk += &d_epf.sum_axis(Axis(0));
        if !self.ablation.no_phn {
            scatter_rows(&mut grad.e_phn, &inp.phoneme_ids, &d_epf);
            scatter_rows(&mut grad.e_tone, &inp.tones, &d_epf);
        }
        let mut d_words = Array2::zeros((inp.token_ids.len(), d));
        if !self.ablation.no_word {
            scatter_rows(&mut d_words, &inp.row_map, &d_epf);
        }
        let flags: Vec<usize> = inp.token_flags.iter().map(|&f| f as usize).collect();
        scatter_rows(&mut grad.e_dia, &flags, &d_words);

        let d_logits = d_out.logits.view().insert_axis(Axis(0)).to_owned();
        let d_utt = p.style.backward(&tr.style, &d_logits, &mut grad.style);
        if p.encoder.trainable {
            p.encoder.backward(
                &tr.enc,
                &d_words,
                &d_utt.row(0).to_owned(),
                &mut grad.encoder,
            );
        }
    }

    /// Teacher-forced forward, batch loss and (optionally) gradients.
    pub fn batch_loss(
        &self,
        examples: &[&UttExample],
        lambdas: &Lambdas,
        want_grad: bool,
    ) -> Result<BatchLoss> {
        let mut outs = Vec::with_capacity(examples.len());
        for ex in examples {
            outs.push(self.forward_input(&ex.input, Some((&ex.pitch, &ex.energy)))?);
        }
        let batch =
            PaddedBatch::assemble(examples, &outs.iter().map(|(o, _)| o).collect::<Vec<_>>())?;
        let (total, components, lg) = utterance_loss(&batch, lambdas)?;
        let grads = if want_grad {
            let mut g = crate::nn::zeroed(&self.params);
            for (b, (ex, (_, tr))) in examples.iter().zip(&outs).enumerate() {
                let n = ex.input.len();
                let og = OutputGrads {
                    pitch: lg.d_pitch.slice(s![b, ..n]).to_owned(),
                    energy: lg.d_energy.slice(s![b, ..n]).to_owned(),
                    lpe: lg.d_lpe.slice(s![b, ..n, ..]).to_owned(),
                    logits: lg.d_logits.row(b).to_owned(),
                };
                self.backward(&ex.input, tr, &og, &mut g);
            }
            Some(g)
        } else {
            None
        };
        Ok(BatchLoss {
            total,
            components,
            outputs: outs.into_iter().map(|(o, _)| o).collect(),
            grads,
        })
    }
}

/// Converts a model output (physical units) to feature rows.
pub fn output_to_features(id: &str, out: &UmpmOutput) -> (PhonemeTargets, PhonemeTargets) {
    let raw = PhonemeTargets {
        utterance_id: id.to_string(),
        pitch: out.pitch_hat.clone(),
        energy: out.energy_hat.clone(),
        lpe: out.lpe_hat.clone(),
    };
    let mut clamped = raw.clone();
    for row in &mut clamped.lpe {
        for v in row.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }
    (clamped, raw)
}

#[derive(Debug, Clone)]
pub struct OutputGrads {
    pub pitch: Array1<f64>,
    pub energy: Array1<f64>,
    pub lpe: Array2<f64>,
    pub logits: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct BatchLoss {
    pub total: f64,
    pub components: LossComponents,
    pub outputs: Vec<UmpmOutput>,
    pub grads: Option<UmpmParams>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lambdas {
    pub pitch: f64,
    pub energy: f64,
    pub lpe: f64,
    pub gse: f64,
}

impl Default for Lambdas {
    fn default() -> Self {
        Self::from(&Stage1Config::default())
    }
}

impl From<&Stage1Config> for Lambdas {
    fn from(c: &Stage1Config) -> Self {
        Self {
            pitch: c.lambda_pitch,
            energy: c.lambda_energy,
            lpe: c.lambda_lpe,
            gse: c.lambda_gse,
        }
    }
}

impl Lambdas {
    pub fn as_array(&self) -> [f64; 4] {
        [self.pitch, self.energy, self.lpe, self.gse]
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossComponents {
    pub pitch_mse: f64,
    pub energy_mse: f64,
    pub lpe_mse: f64,
    pub style_ce: f64,
}

impl LossComponents {
    pub fn as_array(&self) -> [f64; 4] {
        [self.pitch_mse, self.energy_mse, self.lpe_mse, self.style_ce]
    }

    /// `λ · components`, summed left to right.
    pub fn total(&self, l: &Lambdas) -> f64 {
        l.as_array()
            .iter()
            .zip(self.as_array())
            .fold(0.0, |acc, (w, c)| acc + w * c)
    }
}

/// Batch-major padded tensors for the utterance loss.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedBatch {
    pub pitch_hat: Array2<f64>,
    pub energy_hat: Array2<f64>,
    pub lpe_hat: Array3<f64>,
    pub pitch: Array2<f64>,
    pub energy: Array2<f64>,
    pub lpe: Array3<f64>,
    pub mask: Array2<bool>,
    pub logits: Array2<f64>,
    pub labels: Vec<usize>,
}

impl PaddedBatch {
    pub fn assemble(examples: &[&UttExample], outs: &[&UmpmOutput]) -> Result<Self> {
        let b = examples.len();
        if b == 0 || outs.len() != b {
            return Err(Error::Validation("empty or mismatched batch".into()));
        }
        let n_max = examples.iter().map(|e| e.input.len()).max().unwrap_or(0);
        let classes = outs[0].style_logits.len();
        let mut batch = Self {
            pitch_hat: Array2::zeros((b, n_max)),
            energy_hat: Array2::zeros((b, n_max)),
            lpe_hat: Array3::zeros((b, n_max, LPE_DIM)),
            pitch: Array2::zeros((b, n_max)),
            energy: Array2::zeros((b, n_max)),
            lpe: Array3::zeros((b, n_max, LPE_DIM)),
            mask: Array2::from_elem((b, n_max), false),
            logits: Array2::zeros((b, classes)),
            labels: examples.iter().map(|e| e.style).collect(),
        };
        for (i, (ex, out)) in examples.iter().zip(outs).enumerate() {
            let n = ex.input.len();
            if out.len() != n || ex.pitch.len() != n || ex.lpe.len() != n || ex.mask.len() != n {
                return Err(Error::length("batch item", n, out.len()));
            }
            for p in 0..n {
                batch.pitch_hat[[i, p]] = out.pitch_hat[p];
                batch.energy_hat[[i, p]] = out.energy_hat[p];
                batch.pitch[[i, p]] = ex.pitch[p];
                batch.energy[[i, p]] = ex.energy[p];
                batch.mask[[i, p]] = ex.mask[p];
                for k in 0..LPE_DIM {
                    batch.lpe_hat[[i, p, k]] = out.lpe_hat[p][k];
                    batch.lpe[[i, p, k]] = ex.lpe[p][k];
                }
            }
            batch
                .logits
                .row_mut(i)
                .assign(&Array1::from(out.style_logits.clone()));
        }
        Ok(batch)
    }

    /// A copy with `extra` masked columns appended.
    pub fn with_padding(&self, extra: usize, fill: f64) -> Self {
        let (b, n) = self.pitch.dim();
        let pad2 = |a: &Array2<f64>| {
            let mut o = Array2::from_elem((b, n + extra), fill);
            o.slice_mut(s![.., ..n]).assign(a);
            o
        };
        let pad3 = |a: &Array3<f64>| {
            let mut o = Array3::from_elem((b, n + extra, LPE_DIM), fill);
            o.slice_mut(s![.., ..n, ..]).assign(a);
            o
        };
        let mut mask = Array2::from_elem((b, n + extra), false);
        mask.slice_mut(s![.., ..n]).assign(&self.mask);
        Self {
            pitch_hat: pad2(&self.pitch_hat),
            energy_hat: pad2(&self.energy_hat),
            lpe_hat: pad3(&self.lpe_hat),
            pitch: pad2(&self.pitch),
            energy: pad2(&self.energy),
            lpe: pad3(&self.lpe),
            mask,
            logits: self.logits.clone(),
            labels: self.labels.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LossGrads {
    pub d_pitch: Array2<f64>,
    pub d_energy: Array2<f64>,
    pub d_lpe: Array3<f64>,
    pub d_logits: Array2<f64>,
}

/// Masked MSE over a `B × N` tensor and its gradient scaled by `weight`.
/// Masked entries contribute exactly zero and are never read.
pub fn masked_mse2(
    pred: &Array2<f64>,
    target: &Array2<f64>,
    mask: &Array2<bool>,
    weight: f64,
) -> (f64, Array2<f64>) {
    let count = mask.iter().filter(|m| **m).count() as f64;
    let mut sum = 0.0;
    let mut grad = Array2::zeros(pred.raw_dim());
    for ((idx, &m), g) in mask.indexed_iter().zip(grad.iter_mut()) {
        if m {
            let e = pred[idx] - target[idx];
            sum += e * e;
            *g = weight * 2.0 * e / count;
        }
    }
    (sum / count, grad)
}

/// Masked MSE over a `B × N × K` tensor, averaged over the `K` components.
pub fn masked_mse3(
    pred: &Array3<f64>,
    target: &Array3<f64>,
    mask: &Array2<bool>,
    weight: f64,
) -> (f64, Array3<f64>) {
    let k = pred.dim().2;
    let count = (mask.iter().filter(|m| **m).count() * k) as f64;
    let mut sum = 0.0;
    let mut grad = Array3::zeros(pred.raw_dim());
    for ((b, n), &m) in mask.indexed_iter() {
        if m {
            for c in 0..k {
                let e = pred[[b, n, c]] - target[[b, n, c]];
                sum += e * e;
                grad[[b, n, c]] = weight * 2.0 * e / count;
            }
        }
    }
    (sum / count, grad)
}

/// Mean cross-entropy over rows of `logits` and its gradient scaled by
/// `weight`.
pub fn cross_entropy(
    logits: &Array2<f64>,
    labels: &[usize],
    weight: f64,
) -> Result<(f64, Array2<f64>)> {
    let b = logits.nrows();
    let classes = logits.ncols();
    let mut sum = 0.0;
    let mut grad = Array2::zeros(logits.raw_dim());
    for (i, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::Unknown {
                what: "style label",
                value: label.to_string(),
                known: format!("0..{classes}"),
            });
        }
        let row = logits.row(i).to_vec();
        sum += log_sum_exp(&row) - row[label];
        for (c, p) in softmax(&row).into_iter().enumerate() {
            let target = if c == label { 1.0 } else { 0.0 };
            grad[[i, c]] = weight * (p - target) / b as f64;
        }
    }
    Ok((sum / b as f64, grad))
}

/// Weighted utterance loss over a padded batch, with gradients of the total
/// with respect to every prediction.
pub fn utterance_loss(
    batch: &PaddedBatch,
    lambdas: &Lambdas,
) -> Result<(f64, LossComponents, LossGrads)> {
    if !batch.mask.iter().any(|m| *m) {
        return Err(Error::Validation("loss over a fully masked batch".into()));
    }
    if batch.labels.len() != batch.logits.nrows() {
        return Err(Error::length(
            "style labels",
            batch.logits.nrows(),
            batch.labels.len(),
        ));
    }
    let (pitch_mse, d_pitch) =
        masked_mse2(&batch.pitch_hat, &batch.pitch, &batch.mask, lambdas.pitch);
    let (energy_mse, d_energy) = masked_mse2(
        &batch.energy_hat,
        &batch.energy,
        &batch.mask,
        lambdas.energy,
    );
    let (lpe_mse, d_lpe) = masked_mse3(&batch.lpe_hat, &batch.lpe, &batch.mask, lambdas.lpe);
    let (style_ce, d_logits) = cross_entropy(&batch.logits, &batch.labels, lambdas.gse)?;
    let components = LossComponents {
        pitch_mse,
        energy_mse,
        lpe_mse,
        style_ce,
    };
    Ok((
        components.total(lambdas),
        components,
        LossGrads {
            d_pitch,
            d_energy,
            d_lpe,
            d_logits,
        },
    ))
}
