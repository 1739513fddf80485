//! Shared fixtures for the integration tests: random utterances, micro
//! models and a central-difference gradient checker.
#![allow(dead_code)]

use std::collections::BTreeMap;

use proso::config::{Ablation, ModelConfig};
use proso::corpus::{
    assign_dialogue_flags, tokenize_and_separate, Discourse, PinyinEntry, QuoteConfig, Utterance,
};
use proso::encoder::Vocabulary;
use proso::features::PhonemeTargets;
use proso::model_u::{Inventory, Umpm};
use proso::nn::init::ParamRng;
use proso::nn::{flatten, Params};
use rand::{Rng, SeedableRng};

pub const CHARS: [&str; 8] = ["甲", "乙", "丙", "丁", "戊", "己", "庚", "辛"];

pub fn rng(seed: u64) -> ParamRng {
    ParamRng::seed_from_u64(seed)
}

/// Random utterance with `1..=max_words` lexical words of `1..=max_phonemes`
/// phonemes each, occasional commas and an optional quoted span.
pub fn random_utterance(
    rng: &mut ParamRng,
    id: &str,
    max_words: usize,
    max_phonemes: usize,
) -> Utterance {
    let n = rng.gen_range(1..=max_words);
    let quote = if n >= 2 && rng.gen_bool(0.3) {
        let a = rng.gen_range(0..n);
        Some((a, rng.gen_range(a..n)))
    } else {
        None
    };
    let mut text = String::new();
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        if quote.is_some_and(|(a, _)| a == i) {
            text.push('“');
        }
        let w = CHARS[rng.gen_range(0..CHARS.len())];
        text.push_str(w);
        let p = rng.gen_range(1..=max_phonemes);
        let symbols: Vec<String> = (0..p)
            .map(|_| format!("p{}", rng.gen_range(0..6)))
            .collect();
        let refs: Vec<&str> = symbols.iter().map(String::as_str).collect();
        entries.push(PinyinEntry::new(w, &refs, rng.gen_range(1..=5)));
        if quote.is_some_and(|(_, b)| b == i) {
            text.push('”');
        }
        if i + 1 < n && rng.gen_bool(0.2) {
            text.push('，');
        }
    }
    text.push('。');
    let mut u = tokenize_and_separate(&text, &entries).expect("generated text is consistent");
    u = assign_dialogue_flags(&u, &QuoteConfig::default());
    u.id = id.to_string();
    u
}

/// Random utterance with at most `max_n` phonemes.
pub fn bounded_utterance(rng: &mut ParamRng, id: &str, max_n: usize) -> Utterance {
    loop {
        let u = random_utterance(rng, id, 3, 2);
        if u.phoneme_count() <= max_n {
            return u;
        }
    }
}

/// A discourse of `m` utterances, each with at most `max_n` phonemes, and
/// speakers and styles drawn from `0..2`.
pub fn micro_discourse(rng: &mut ParamRng, id: &str, m: usize, max_n: usize) -> Discourse {
    let utterances = (0..m)
        .map(|i| {
            let mut u = bounded_utterance(rng, &Discourse::utterance_id(id, i), max_n);
            u.speaker_id = rng.gen_range(0..2);
            u.style_label = rng.gen_range(0..2);
            u
        })
        .collect();
    Discourse {
        id: id.to_string(),
        utterances,
        style_label: rng.gen_range(0..2),
    }
}

/// Random targets with plausible scales: log-f0 near 5, energy near 1,
/// LPE inside the unit cube.
pub fn random_targets(rng: &mut ParamRng, utt: &Utterance) -> PhonemeTargets {
    let n = utt.phoneme_count();
    PhonemeTargets {
        utterance_id: utt.id.clone(),
        pitch: (0..n).map(|_| rng.gen_range(4.5..5.5)).collect(),
        energy: (0..n).map(|_| rng.gen_range(0.5..1.5)).collect(),
        lpe: (0..n)
            .map(|_| std::array::from_fn(|_| rng.gen_range(0.0..1.0)))
            .collect(),
    }
}

pub fn micro_config() -> ModelConfig {
    ModelConfig {
        d: 4,
        r: 4,
        predictor_hidden: Some(2),
        classifier_hidden: 3,
        attention_dim: 3,
        ..ModelConfig::default()
    }
}

/// A stage-1 model whose inventory and vocabulary cover `discourses`.
pub fn micro_umpm(
    config: &ModelConfig,
    ablation: Ablation,
    discourses: &[Discourse],
    seed: u64,
) -> Umpm {
    let mut inv = Inventory::from_corpus(discourses);
    inv.num_speakers = inv.num_speakers.max(2);
    let vocab = Vocabulary::from_corpus(discourses);
    Umpm::new(config, ablation, inv, vocab, &mut rng(seed)).expect("valid micro model")
}

/// Redraws every tensor uniformly from `[-scale, scale]`. Gradient checks
/// use this so that no block sits in the near-zero-gradient regime of the
/// small default initialisation, where central differences are dominated
/// by rounding.
pub fn redraw(p: &mut dyn Params, scale: f64, rng: &mut ParamRng) {
    p.visit_mut("", &mut |_, v| {
        v.iter_mut().for_each(|x| *x = rng.gen_range(-scale..scale))
    });
}

/// Adds `delta` to one scalar of the tensor called `name`.
pub fn nudge(p: &mut dyn Params, name: &str, index: usize, delta: f64) {
    p.visit_mut("", &mut |n, v| {
        if n == name {
            v[index] += delta;
        }
    });
}

/// Result of comparing one tensor's analytic gradient with central
/// differences: `‖a − n‖ / max(‖a‖, ‖n‖)`, or 0 when both vanish.
#[derive(Debug, Clone)]
pub struct TensorCheck {
    pub name: String,
    pub rel_error: f64,
    pub analytic_norm: f64,
}

/// Central differences with step `h` for every scalar of every tensor in
/// `analytic`. `loss_after(name, index, delta)` must return the loss with
/// that scalar shifted by `delta`, leaving the model unchanged afterwards.
pub fn finite_difference_check(
    analytic: &dyn Params,
    h: f64,
    mut loss_after: impl FnMut(&str, usize, f64) -> f64,
) -> Vec<TensorCheck> {
    let mut out = Vec::new();
    for t in flatten(analytic, "") {
        let (mut diff, mut an, mut nn) = (0.0, 0.0, 0.0);
        for (i, a) in t.values.iter().enumerate() {
            let plus = loss_after(&t.name, i, h);
            let minus = loss_after(&t.name, i, -h);
            let numeric = (plus - minus) / (2.0 * h);
            diff += (a - numeric).powi(2);
            an += a * a;
            nn += numeric * numeric;
        }
        let denom = an.sqrt().max(nn.sqrt());
        let rel_error = if denom == 0.0 {
            0.0
        } else {
            diff.sqrt() / denom
        };
        out.push(TensorCheck {
            name: t.name,
            rel_error,
            analytic_norm: an.sqrt(),
        });
    }
    out
}

/// Worst relative error per top-level parameter block (`e_phn`,
/// `encoder.rnn`, ...).
pub fn worst_by_block(checks: &[TensorCheck], depth: usize) -> BTreeMap<String, f64> {
    let mut out: BTreeMap<String, f64> = BTreeMap::new();
    for c in checks {
        let block: Vec<&str> = c.name.split('.').take(depth).collect();
        let e = out.entry(block.join(".")).or_insert(0.0);
        *e = e.max(c.rel_error);
    }
    out
}
