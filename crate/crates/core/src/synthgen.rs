//! Synthetic corpora with closed-form prosody targets.
//!
//! Every LPE target is a fixed function of the text (and, for the
//! `context_offset` law, of the neighbouring utterances' styles), so
//! learnability and ablation claims can be checked against known ground
//! truth. The generator writes the same file kinds a real corpus uses plus
//! `law.json`, which holds every law parameter.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    assign_dialogue_flags, assign_tone_labels, phoneme_dialogue_flags, split_by_discourse,
    tokenize_and_separate, write_manifest, Discourse, PinyinEntry, QuoteConfig, Utterance,
    WordKind, MAX_TONE, TONE_CLASSES,
};
use crate::error::{Error, Result};
use crate::features::{
    build_targets, write_alignment, write_feature_file, write_frame_track, write_lpe_file,
    AlignmentTrack, FrameTrack, Interval, Lpe, PhonemeTargets, LPE_DIM, SILENCE,
};
use crate::nn::sigmoid;

pub const LAW_FILE: &str = "law.json";
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const TRAIN_FILE: &str = "train.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const FRAMES_DIR: &str = "frames";
pub const ALIGN_DIR: &str = "align";
pub const LPE_DIR: &str = "lpe";
pub const FEATURES_DIR: &str = "features";
const FIRST_CHAR: u32 = 0x4E00;
const FRAME_PERIOD_MS: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetLaw {
    WordDependent,
    PhonemeDependent,
    ContextOffset,
    Mixed,
}

impl TargetLaw {
    pub fn name(self) -> &'static str {
        match self {
            Self::WordDependent => "word_dependent",
            Self::PhonemeDependent => "phoneme_dependent",
            Self::ContextOffset => "context_offset",
            Self::Mixed => "mixed",
        }
    }
}

impl std::fmt::Display for TargetLaw {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for TargetLaw {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "word_dependent" => Ok(Self::WordDependent),
            "phoneme_dependent" => Ok(Self::PhonemeDependent),
            "context_offset" => Ok(Self::ContextOffset),
            "mixed" => Ok(Self::Mixed),
            other => Err(Error::Unknown {
                what: "target law",
                value: other.to_string(),
                known: "word_dependent, phoneme_dependent, context_offset, mixed".into(),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSpec {
    pub num_discourses: usize,
    pub utterances_per_discourse: usize,
    pub vocab_size: usize,
    pub phoneme_alphabet_size: usize,
    pub num_speakers: usize,
    pub num_styles: usize,
    pub seed: u64,
    pub target_law: TargetLaw,
    pub test_fraction: f64,
    pub min_words: usize,
    pub max_words: usize,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            num_discourses: 200,
            utterances_per_discourse: 10,
            vocab_size: 120,
            phoneme_alphabet_size: 16,
            num_speakers: 4,
            num_styles: 2,
            seed: 0,
            target_law: TargetLaw::WordDependent,
            test_fraction: 0.2,
            min_words: 4,
            max_words: 7,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_discourses", self.num_discourses),
            ("utterances_per_discourse", self.utterances_per_discourse),
            ("vocab_size", self.vocab_size),
            ("phoneme_alphabet_size", self.phoneme_alphabet_size),
            ("num_speakers", self.num_speakers),
            ("min_words", self.min_words),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Validation(format!("{name} must be positive")));
            }
        }
        if self.num_styles < 2 {
            return Err(Error::Validation("num_styles must be at least 2".into()));
        }
        if self.vocab_size < self.num_styles {
            return Err(Error::Validation(
                "vocab_size must be at least num_styles".into(),
            ));
        }
        if self.max_words < self.min_words {
            return Err(Error::Validation(
                "max_words must be at least min_words".into(),
            ));
        }
        if self.num_discourses < 2 {
            return Err(Error::Validation(
                "need at least 2 discourses for a train/test split".into(),
            ));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::Validation("test_fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// All parameters of a generated corpus's target laws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Law {
    pub spec: GeneratorSpec,
    /// Per-word `(phonemes, tone)`; several words share a pronunciation.
    pub pronunciations: Vec<(Vec<String>, u8)>,
    /// LPE logit contribution of each word id.
    pub word_proj: Vec<Lpe>,
    /// LPE logit contribution of each phoneme id.
    pub phoneme_proj: Vec<Lpe>,
    /// LPE logit contribution of each tone label `0..=5`.
    pub tone_proj: Vec<Lpe>,
    /// Added to the logit of dialogue phonemes.
    pub dialogue: Lpe,
    /// Logit bias of a pausing separator.
    pub separator_bias: Lpe,
    /// Weight of the preceding word's projection at a pausing separator.
    pub separator_word_weight: f64,
    /// Whether a pause follows each word id when another word comes next.
    pub pause_after: Vec<bool>,
    /// Multiplier `1 - scale + scale·o_u` under `context_offset`.
    pub context_scale: f64,
    pub speaker_f0_hz: Vec<f64>,
    pub tone_pitch: Vec<f64>,
    pub word_pitch: Vec<f64>,
    pub word_energy: Vec<f64>,
    pub phoneme_energy: Vec<f64>,
}

fn phoneme_id(symbol: &str) -> usize {
    symbol
        .strip_prefix('p')
        .and_then(|s| s.parse().ok())
        .expect("synthetic phoneme symbols are p<k>")
}

fn word_id(surface: &str) -> Option<usize> {
    let c = surface.chars().next()?;
    (c as u32).checked_sub(FIRST_CHAR).map(|v| v as usize)
}

pub fn word_surface(v: usize) -> String {
    char::from_u32(FIRST_CHAR + v as u32)
        .expect("valid code point")
        .to_string()
}

impl Law {
    fn sample(spec: &GeneratorSpec, rng: &mut ChaCha8Rng) -> Self {
        let k = spec.phoneme_alphabet_size;
        let n_prons = (spec.vocab_size / 2).max(1);
        let prons: Vec<(Vec<String>, u8)> = (0..n_prons)
            .map(|_| {
                let len = rng.gen_range(1..=3);
                let ph = (0..len)
                    .map(|_| format!("p{}", rng.gen_range(0..k)))
                    .collect();
                (ph, rng.gen_range(1..=MAX_TONE))
            })
            .collect();
        let pronunciations = (0..spec.vocab_size)
            .map(|_| prons[rng.gen_range(0..n_prons)].clone())
            .collect();
        let mut lpe =
            |scale: f64| -> Lpe { std::array::from_fn(|_| rng.gen_range(-scale..=scale)) };
        let word_proj = (0..spec.vocab_size).map(|_| lpe(1.5)).collect();
        let phoneme_proj = (0..k).map(|_| lpe(1.0)).collect();
        let tone_proj = (0..TONE_CLASSES).map(|_| lpe(0.5)).collect();
        let dialogue = lpe(0.8);
        let separator_bias = lpe(0.5);
        Self {
            spec: spec.clone(),
            pronunciations,
            word_proj,
            phoneme_proj,
            tone_proj,
            dialogue,
            separator_bias,
            separator_word_weight: 0.5,
            pause_after: (0..spec.vocab_size).map(|_| rng.gen_bool(0.5)).collect(),
            context_scale: 0.25,
            speaker_f0_hz: (0..spec.num_speakers)
                .map(|_| rng.gen_range(100.0..250.0))
                .collect(),
            tone_pitch: (0..TONE_CLASSES)
                .map(|_| rng.gen_range(-0.15..0.15))
                .collect(),
            word_pitch: (0..spec.vocab_size)
                .map(|_| rng.gen_range(-0.1..0.1))
                .collect(),
            word_energy: (0..spec.vocab_size)
                .map(|_| rng.gen_range(-0.3..0.3))
                .collect(),
            phoneme_energy: (0..k).map(|_| rng.gen_range(-0.1..0.1)).collect(),
        }
    }

    pub fn pinyin(&self, v: usize) -> PinyinEntry {
        let (ph, tone) = &self.pronunciations[v];
        PinyinEntry {
            word: word_surface(v),
            phonemes: ph.clone(),
            tone: *tone,
        }
    }

    /// Per-phoneme `(base LPE, pause-free separator)` before any context
    /// scaling. Separator silence follows `pause_after` of the preceding
    /// word.
    pub fn base_lpe(&self, utt: &Utterance) -> Result<Vec<Lpe>> {
        let tones = assign_tone_labels(utt)?;
        let flags = phoneme_dialogue_flags(utt);
        let mut out = Vec::with_capacity(tones.len());
        let mut prev_word = None;
        let mut pos = 0;
        for w in &utt.words {
            match w.kind {
                WordKind::Punctuation => {}
                WordKind::Separator => {
                    let prev = prev_word.ok_or_else(|| {
                        Error::Validation("separator without a preceding word".into())
                    })?;
                    let row = if self.pause_after[prev] {
                        let a: &Lpe = &self.word_proj[prev];
                        std::array::from_fn(|k| {
                            sigmoid(
                                self.separator_word_weight * a[k]
                                    + self.separator_bias[k]
                                    + self.dialogue[k] * f64::from(flags[pos]),
                            )
                        })
                    } else {
                        [0.0; LPE_DIM]
                    };
                    out.push(row);
                    pos += 1;
                }
                WordKind::Lexical => {
                    let v = word_id(&w.surface)
                        .filter(|v| *v < self.spec.vocab_size)
                        .ok_or_else(|| {
                            Error::Validation(format!("`{}` is not a synthetic word", w.surface))
                        })?;
                    for ph in &w.phonemes {
                        let p = phoneme_id(&ph.symbol);
                        let t = tones[pos] as usize;
                        let f = f64::from(flags[pos]);
                        let row = std::array::from_fn(|k| {
                            let text = match self.spec.target_law {
                                TargetLaw::PhonemeDependent => self.phoneme_proj[p][k],
                                TargetLaw::Mixed => self.word_proj[v][k] + self.phoneme_proj[p][k],
                                TargetLaw::WordDependent | TargetLaw::ContextOffset => {
                                    self.word_proj[v][k]
                                }
                            };
                            sigmoid(text + self.tone_proj[t][k] + self.dialogue[k] * f)
                        });
                        out.push(row);
                        pos += 1;
                    }
                    prev_word = Some(v);
                }
            }
        }
        Ok(out)
    }

    /// The context signal `o_u ∈ [-1, 1]` of utterance `u`: the mean
    /// neighbour style mapped to ±1 (two-style corpora), 0 for a single
    /// utterance or any law other than `context_offset`.
    pub fn context_signal(&self, discourse: &Discourse, u: usize) -> f64 {
        if self.spec.target_law != TargetLaw::ContextOffset {
            return 0.0;
        }
        let m = discourse.utterances.len();
        let s = |i: usize| (discourse.utterances[i].style_label % 2) as f64;
        match (u > 0, u + 1 < m) {
            (true, true) => s(u - 1) + s(u + 1) - 1.0,
            (true, false) => 2.0 * s(u - 1) - 1.0,
            (false, true) => 2.0 * s(u + 1) - 1.0,
            (false, false) => 0.0,
        }
    }

    /// Variance of [`Law::context_signal`] when neighbour styles are
    /// independent fair coins.
    pub fn context_signal_variance(&self, m: usize, u: usize) -> f64 {
        if self.spec.target_law != TargetLaw::ContextOffset || m < 2 {
            return 0.0;
        }
        if u == 0 || u + 1 == m {
            1.0
        } else {
            0.5
        }
    }

    /// Final LPE targets of utterance `u` of `discourse`.
    pub fn lpe(&self, discourse: &Discourse, u: usize) -> Result<Vec<Lpe>> {
        let base = self.base_lpe(&discourse.utterances[u])?;
        let c = self.context_scale;
        let factor = 1.0 - c + c * self.context_signal(discourse, u);
        Ok(base
            .into_iter()
            .map(|row| row.map(|x| x * factor))
            .collect())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

/// Everything a generation run produced, in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedCorpus {
    pub law: Law,
    pub discourses: Vec<Discourse>,
    pub train: Vec<Discourse>,
    pub test: Vec<Discourse>,
    pub frames: Vec<FrameTrack>,
    pub alignments: Vec<AlignmentTrack>,
    pub lpe: Vec<(String, Vec<Lpe>)>,
    pub features: Vec<PhonemeTargets>,
}

fn sample_text(law: &Law, style: usize, rng: &mut ChaCha8Rng) -> (String, Vec<PinyinEntry>) {
    let spec = &law.spec;
    let n = rng.gen_range(spec.min_words..=spec.max_words);
    let style_words: Vec<usize> = (0..spec.vocab_size)
        .filter(|v| v % spec.num_styles == style)
        .collect();
    let mut words = vec![*style_words.choose(rng).expect("every style owns a word")];
    words.extend((1..n).map(|_| rng.gen_range(0..spec.vocab_size)));
    // optional quoted span and comma
    let quote = (n >= 2 && rng.gen_bool(0.3)).then(|| {
        let a = rng.gen_range(1..n);
        (a, rng.gen_range(a..n))
    });
    let comma = (n >= 3 && rng.gen_bool(0.3)).then(|| rng.gen_range(1..n));
    let mut text = String::new();
    for (i, &v) in words.iter().enumerate() {
        if comma == Some(i) {
            text.push('，');
        }
        if quote.is_some_and(|(a, _)| a == i) {
            text.push('“');
        }
        text.push_str(&word_surface(v));
        if quote.is_some_and(|(_, b)| b == i) {
            text.push('”');
        }
    }
    text.push('。');
    (text, words.iter().map(|&v| law.pinyin(v)).collect())
}

fn zero_mean(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(-scale..=scale)).collect();
    let mean = raw.iter().sum::<f64>() / n as f64;
    raw.into_iter().map(|x| x - mean).collect()
}

/// Frame track and alignment whose per-phoneme means follow the pitch and
/// energy laws.
fn render_audio(
    law: &Law,
    utt: &Utterance,
    rng: &mut ChaCha8Rng,
) -> Result<(FrameTrack, AlignmentTrack)> {
    let tones = assign_tone_labels(utt)?;
    let mut f0 = Vec::new();
    let mut energy = Vec::new();
    let mut intervals: Vec<Interval> = Vec::new();
    let push_silence = |f0: &mut Vec<f64>,
                        energy: &mut Vec<f64>,
                        intervals: &mut Vec<Interval>,
                        rng: &mut ChaCha8Rng| {
        let len = rng.gen_range(3..=8);
        let start = f0.len();
        for _ in 0..len {
            f0.push(0.0);
            energy.push(rng.gen_range(0.01..0.03));
        }
        intervals.push(Interval::new(SILENCE, start, start + len));
    };
    push_silence(&mut f0, &mut energy, &mut intervals, rng);
    let mut pos = 0;
    let mut prev_word = None;
    for w in &utt.words {
        match w.kind {
            WordKind::Punctuation => {
                if !intervals.last().is_some_and(Interval::is_silence) && rng.gen_bool(0.5) {
                    push_silence(&mut f0, &mut energy, &mut intervals, rng);
                }
            }
            WordKind::Separator => {
                let prev: usize = prev_word.expect("validated utterance");
                if law.pause_after[prev] {
                    push_silence(&mut f0, &mut energy, &mut intervals, rng);
                }
                pos += 1;
            }
            WordKind::Lexical => {
                let v = word_id(&w.surface).expect("synthetic word");
                for ph in &w.phonemes {
                    let p = phoneme_id(&ph.symbol);
                    let mu = law.speaker_f0_hz[utt.speaker_id].ln()
                        + law.tone_pitch[tones[pos] as usize]
                        + law.word_pitch[v];
                    let e = 1.0 + law.word_energy[v] + law.phoneme_energy[p];
                    let len = rng.gen_range(3..=8);
                    let start = f0.len();
                    let dp = zero_mean(rng, len, 0.02);
                    let de = zero_mean(rng, len, 0.05);
                    for k in 0..len {
                        f0.push((mu + dp[k]).exp());
                        energy.push(e + de[k]);
                    }
                    intervals.push(Interval::new(&ph.symbol, start, start + len));
                    pos += 1;
                }
                prev_word = Some(v);
            }
        }
    }
    if !intervals.last().is_some_and(Interval::is_silence) {
        push_silence(&mut f0, &mut energy, &mut intervals, rng);
    }
    Ok((
        FrameTrack {
            utterance_id: utt.id.clone(),
            frame_period_ms: FRAME_PERIOD_MS,
            f0_hz: f0,
            energy,
        },
        AlignmentTrack {
            utterance_id: utt.id.clone(),
            intervals,
        },
    ))
}

/// Builds a corpus in memory.
pub fn generate_in_memory(spec: &GeneratorSpec) -> Result<GeneratedCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let law = Law::sample(spec, &mut rng);
    let quotes = QuoteConfig::default();
    let mut discourses = Vec::with_capacity(spec.num_discourses);
    for j in 0..spec.num_discourses {
        let id = format!("d{j:04}");
        let d_style = rng.gen_range(0..spec.num_styles);
        let mut utterances = Vec::with_capacity(spec.utterances_per_discourse);
        for i in 0..spec.utterances_per_discourse {
            let style = if spec.target_law == TargetLaw::ContextOffset {
                rng.gen_range(0..spec.num_styles)
            } else {
                d_style
            };
            let (text, pinyin) = sample_text(&law, style, &mut rng);
            let mut utt = tokenize_and_separate(&text, &pinyin)?;
            utt.id = Discourse::utterance_id(&id, i);
            utt.speaker_id = rng.gen_range(0..spec.num_speakers);
            utt.style_label = style;
            utterances.push(assign_dialogue_flags(&utt, &quotes));
        }
        let style_label = if spec.target_law == TargetLaw::ContextOffset {
            majority_style(&utterances)
        } else {
            d_style
        };
        discourses.push(Discourse {
            id,
            utterances,
            style_label,
        });
    }
    let mut frames = Vec::new();
    let mut alignments = Vec::new();
    let mut lpe = Vec::new();
    let mut features = Vec::new();
    for d in &mut discourses {
        for u in 0..d.utterances.len() {
            let rows = law.lpe(d, u)?;
            let (track, align) = render_audio(&law, &d.utterances[u], &mut rng)?;
            let (marked, targets) = build_targets(&d.utterances[u], &track, &align, &rows)?;
            d.utterances[u] = marked;
            lpe.push((track.utterance_id.clone(), rows));
            frames.push(track);
            alignments.push(align);
            features.push(targets);
        }
    }
    let (train, test) = split_by_discourse(&discourses, spec.test_fraction, spec.seed)?;
    Ok(GeneratedCorpus {
        law,
        discourses,
        train,
        test,
        frames,
        alignments,
        lpe,
        features,
    })
}

/// Most frequent utterance style; ties go to the lowest style index, the
/// same rule used when voting over predicted utterance styles.
pub fn majority_style(utterances: &[Utterance]) -> usize {
    let labels: Vec<usize> = utterances.iter().map(|u| u.style_label).collect();
    crate::eval::majority_vote(&labels)
}

fn write_file(path: &Path, f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

/// Writes a generated corpus under `out`, which must be empty or absent.
pub fn generate(spec: &GeneratorSpec, out: &Path) -> Result<GeneratedCorpus> {
    if out.exists() && fs::read_dir(out)?.next().is_some() {
        return Err(Error::Validation(format!(
            "output directory {} is not empty",
            out.display()
        )));
    }
    let corpus = generate_in_memory(spec)?;
    for dir in [FRAMES_DIR, ALIGN_DIR, LPE_DIR, FEATURES_DIR] {
        fs::create_dir_all(out.join(dir))?;
    }
    write_file(&out.join(MANIFEST_FILE), |b| {
        write_manifest(&corpus.discourses, b)
    })?;
    write_file(&out.join(TRAIN_FILE), |b| write_manifest(&corpus.train, b))?;
    write_file(&out.join(TEST_FILE), |b| write_manifest(&corpus.test, b))?;
    corpus.law.write(&out.join(LAW_FILE))?;
    for t in &corpus.frames {
        write_file(
            &out.join(FRAMES_DIR)
                .join(format!("{}.frames", t.utterance_id)),
            |b| write_frame_track(t, b),
        )?;
    }
    for a in &corpus.alignments {
        write_file(
            &out.join(ALIGN_DIR)
                .join(format!("{}.align", a.utterance_id)),
            |b| write_alignment(a, b),
        )?;
    }
    for (id, rows) in &corpus.lpe {
        write_file(&out.join(LPE_DIR).join(format!("{id}.lpe")), |b| {
            write_lpe_file(id, rows, b)
        })?;
    }
    for f in &corpus.features {
        write_file(
            &out.join(FEATURES_DIR)
                .join(format!("{}.feat", f.utterance_id)),
            |b| write_feature_file(f, b),
        )?;
    }
    Ok(corpus)
}

/// Per-component mean LPE over every phoneme of `targets`.
pub fn mean_lpe(targets: &[PhonemeTargets]) -> Result<Lpe> {
    let mut sum = [0.0; LPE_DIM];
    let mut n = 0usize;
    for t in targets {
        for row in &t.lpe {
            for k in 0..LPE_DIM {
                sum[k] += row[k];
            }
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Validation("mean LPE of an empty corpus".into()));
    }
    Ok(sum.map(|s| s / n as f64))
}

/// MSE of predicting the corpus mean LPE everywhere (the per-component
/// variance, averaged over components).
pub fn mean_baseline_mse(targets: &[PhonemeTargets]) -> Result<f64> {
    let mean = mean_lpe(targets)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for t in targets {
        for row in &t.lpe {
            for k in 0..LPE_DIM {
                sum += (row[k] - mean[k]).powi(2);
            }
            n += LPE_DIM;
        }
    }
    Ok(sum / n as f64)
}

/// Expected MSE floor that no single-utterance predictor can beat on
/// `discourses` under the `context_offset` law: the variance the
/// neighbour-style multiplier adds at each phoneme, averaged over phonemes
/// and components. Zero for every other law.
pub fn offset_variance_margin(law: &Law, discourses: &[Discourse]) -> Result<f64> {
    let c = law.context_scale;
    let mut sum = 0.0;
    let mut n = 0usize;
    for d in discourses {
        let m = d.utterances.len();
        for (u, utt) in d.utterances.iter().enumerate() {
            let var = law.context_signal_variance(m, u);
            for row in law.base_lpe(utt)? {
                for x in row {
                    sum += (c * x).powi(2) * var;
                }
                n += LPE_DIM;
            }
        }
    }
    if n == 0 {
        return Err(Error::Validation("margin over an empty corpus".into()));
    }
    Ok(sum / n as f64)
}
