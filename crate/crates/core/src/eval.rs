//! Prediction over whole corpora and the error/accuracy report.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::corpus::{Discourse, Utterance};
use crate::error::{Error, Result};
use crate::features::{PhonemeTargets, LPE_DIM};
use crate::nn::argmax;

pub const STYLES_FILE: &str = "styles.csv";
pub const STYLES_HEADER: &str = "utterance_id,discourse_id,utterance_style,discourse_style";

/// Utterance and discourse style labels (true or predicted) for one utterance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StyleRow {
    pub utterance_id: String,
    pub discourse_id: String,
    pub utterance_style: usize,
    pub discourse_style: usize,
}

/// The ground-truth style table of a corpus.
pub fn true_styles(discourses: &[Discourse]) -> Vec<StyleRow> {
    discourses
        .iter()
        .flat_map(|d| {
            d.utterances.iter().map(move |u| StyleRow {
                utterance_id: u.id.clone(),
                discourse_id: d.id.clone(),
                utterance_style: u.style_label,
                discourse_style: d.style_label,
            })
        })
        .collect()
}

pub fn write_styles<W: Write>(rows: &[StyleRow], mut w: W) -> Result<()> {
    writeln!(w, "{STYLES_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{}",
            r.utterance_id, r.discourse_id, r.utterance_style, r.discourse_style
        )?;
    }
    Ok(())
}

pub fn read_styles<R: BufRead>(reader: R) -> Result<Vec<StyleRow>> {
    let mut rows = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if i == 0 {
            if line.trim() != STYLES_HEADER {
                return Err(Error::parse(
                    1,
                    format!("expected header `{STYLES_HEADER}`"),
                ));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(Error::parse(i + 1, "expected 4 comma-separated fields"));
        }
        let num = |s: &str| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| Error::parse(i + 1, format!("`{s}` is not a style index")))
        };
        rows.push(StyleRow {
            utterance_id: f[0].to_string(),
            discourse_id: f[1].to_string(),
            utterance_style: num(f[2])?,
            discourse_style: num(f[3])?,
        });
    }
    Ok(rows)
}

/// Most frequent label; ties go to the lowest index.
pub fn majority_vote(labels: &[usize]) -> usize {
    let max = labels.iter().copied().max().unwrap_or(0);
    let mut counts = vec![0usize; max + 1];
    for &l in labels {
        counts[l] += 1;
    }
    let best = counts.iter().copied().max().unwrap_or(0);
    counts.iter().position(|&c| c == best).unwrap_or(0)
}

/// Model outputs for a set of discourses.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    /// Exported features (LPE clamped to `[0, 1]`).
    pub clamped: Vec<PhonemeTargets>,
    /// Unclamped features, used for error measurement.
    pub raw: Vec<PhonemeTargets>,
    pub styles: Vec<StyleRow>,
}

fn with_speaker(d: &Discourse, speaker: Option<usize>) -> Discourse {
    let mut d = d.clone();
    if let Some(s) = speaker {
        for u in &mut d.utterances {
            u.speaker_id = s;
        }
    }
    d
}

/// Runs the checkpoint over `discourses`. A stage-1 model predicts each
/// utterance alone and votes for the discourse style; a stage-2 model runs
/// the full discourse path. `speaker` overrides every utterance's speaker.
pub fn predict(
    ckpt: &Checkpoint,
    discourses: &[Discourse],
    speaker: Option<usize>,
) -> Result<Predictions> {
    let known = ckpt.utterance_model().inventory.num_speakers;
    if let Some(s) = speaker {
        if s >= known {
            return Err(Error::Unknown {
                what: "speaker",
                value: s.to_string(),
                known: (0..known)
                    .map(|k| k.to_string())
                    .collect::<Vec<_>>()
                    .join(", "),
            });
        }
    }
    let mut p = Predictions {
        clamped: Vec::new(),
        raw: Vec::new(),
        styles: Vec::new(),
    };
    for d in discourses {
        let d = with_speaker(d, speaker);
        let (features, utt_styles, disc_style) = match ckpt {
            Checkpoint::Stage1(m) => {
                let mut feats = Vec::new();
                let mut styles = Vec::new();
                for u in &d.utterances {
                    let out = m.forward(u, None, crate::model_u::Mode::Infer)?;
                    styles.push(argmax(&out.style_logits));
                    feats.push(crate::model_u::output_to_features(&u.id, &out));
                }
                let vote = majority_vote(&styles);
                (feats, styles, vote)
            }
            Checkpoint::Stage2(m) => {
                let pred = m.predict(&d)?;
                let styles = pred.utterance_logits.iter().map(|l| argmax(l)).collect();
                (pred.features, styles, argmax(&pred.discourse_logits))
            }
        };
        for ((u, (clamped, raw)), s) in d.utterances.iter().zip(features).zip(utt_styles) {
            p.clamped.push(clamped);
            p.raw.push(raw);
            p.styles.push(style_row(&d, u, s, disc_style));
        }
    }
    Ok(p)
}

fn style_row(d: &Discourse, u: &Utterance, utt: usize, disc: usize) -> StyleRow {
    StyleRow {
        utterance_id: u.id.clone(),
        discourse_id: d.id.clone(),
        utterance_style: utt,
        discourse_style: disc,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceScore {
    pub utterance_id: String,
    pub phonemes: usize,
    pub lpe_mse: f64,
    pub pitch_mse: f64,
    pub energy_mse: f64,
    pub style_correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub lpe_mse: f64,
    pub pitch_mse: f64,
    pub energy_mse: f64,
    pub utterance_style_accuracy: f64,
    pub discourse_style_accuracy: f64,
    pub per_utterance: Vec<UtteranceScore>,
}

fn set_difference(a: &BTreeSet<&str>, b: &BTreeSet<&str>) -> String {
    let diff: Vec<&str> = a.difference(b).copied().take(5).collect();
    let more = a.difference(b).count().saturating_sub(diff.len());
    let mut s = diff.join(", ");
    if more > 0 {
        s.push_str(&format!(" and {more} more"));
    }
    s
}

fn check_same_ids<'a>(
    pred: &BTreeSet<&'a str>,
    truth: &BTreeSet<&'a str>,
    what: &str,
) -> Result<()> {
    if pred == truth {
        return Ok(());
    }
    let mut parts = Vec::new();
    if !pred.is_subset(truth) {
        parts.push(format!(
            "predicted but not in targets: {}",
            set_difference(pred, truth)
        ));
    }
    if !truth.is_subset(pred) {
        parts.push(format!(
            "in targets but not predicted: {}",
            set_difference(truth, pred)
        ));
    }
    Err(Error::Validation(format!(
        "{what} sets differ; {}",
        parts.join("; ")
    )))
}

/// Scores predictions against targets. Errors are averaged over every
/// phoneme (separators included) and, for LPE, its three components.
pub fn score(
    predictions: &[PhonemeTargets],
    targets: &[PhonemeTargets],
    predicted_styles: &[StyleRow],
    true_styles: &[StyleRow],
) -> Result<EvalReport> {
    let preds: BTreeMap<&str, &PhonemeTargets> = predictions
        .iter()
        .map(|p| (p.utterance_id.as_str(), p))
        .collect();
    let truth: BTreeMap<&str, &PhonemeTargets> = targets
        .iter()
        .map(|t| (t.utterance_id.as_str(), t))
        .collect();
    check_same_ids(
        &preds.keys().copied().collect(),
        &truth.keys().copied().collect(),
        "utterance",
    )?;
    let pstyles: BTreeMap<&str, &StyleRow> = predicted_styles
        .iter()
        .map(|s| (s.utterance_id.as_str(), s))
        .collect();
    let tstyles: BTreeMap<&str, &StyleRow> = true_styles
        .iter()
        .map(|s| (s.utterance_id.as_str(), s))
        .collect();
    check_same_ids(
        &pstyles.keys().copied().collect(),
        &preds.keys().copied().collect(),
        "predicted style",
    )?;
    check_same_ids(
        &tstyles.keys().copied().collect(),
        &preds.keys().copied().collect(),
        "true style",
    )?;

    let (mut lpe_sum, mut pitch_sum, mut energy_sum, mut count) = (0.0, 0.0, 0.0, 0usize);
    let mut per_utterance = Vec::with_capacity(preds.len());
    let mut utt_correct = 0usize;
    for (id, p) in &preds {
        let t = truth[id];
        if p.len() != t.len() {
            return Err(Error::length(
                format!("phonemes in prediction {id}"),
                t.len(),
                p.len(),
            ));
        }
        let (mut l, mut pi, mut e) = (0.0, 0.0, 0.0);
        for i in 0..t.len() {
            for k in 0..LPE_DIM {
                l += (p.lpe[i][k] - t.lpe[i][k]).powi(2);
            }
            pi += (p.pitch[i] - t.pitch[i]).powi(2);
            e += (p.energy[i] - t.energy[i]).powi(2);
        }
        lpe_sum += l;
        pitch_sum += pi;
        energy_sum += e;
        count += t.len();
        let n = t.len().max(1) as f64;
        let correct = pstyles[id].utterance_style == tstyles[id].utterance_style;
        utt_correct += usize::from(correct);
        per_utterance.push(UtteranceScore {
            utterance_id: id.to_string(),
            phonemes: t.len(),
            lpe_mse: l / (n * LPE_DIM as f64),
            pitch_mse: pi / n,
            energy_mse: e / n,
            style_correct: correct,
        });
    }
    if count == 0 {
        return Err(Error::Validation("nothing to evaluate".into()));
    }

    let mut disc_pred: BTreeMap<&str, usize> = BTreeMap::new();
    let mut disc_true: BTreeMap<&str, usize> = BTreeMap::new();
    for s in predicted_styles {
        if *disc_pred
            .entry(&s.discourse_id)
            .or_insert(s.discourse_style)
            != s.discourse_style
        {
            return Err(Error::Validation(format!(
                "discourse {} has inconsistent predicted styles",
                s.discourse_id
            )));
        }
    }
    for s in true_styles {
        disc_true
            .entry(&s.discourse_id)
            .or_insert(s.discourse_style);
    }
    check_same_ids(
        &disc_pred.keys().copied().collect(),
        &disc_true.keys().copied().collect(),
        "discourse",
    )?;
    let disc_correct = disc_pred
        .iter()
        .filter(|(d, s)| disc_true[*d] == **s)
        .count();

    let n = count as f64;
    Ok(EvalReport {
        lpe_mse: lpe_sum / (n * LPE_DIM as f64),
        pitch_mse: pitch_sum / n,
        energy_mse: energy_sum / n,
        utterance_style_accuracy: utt_correct as f64 / preds.len() as f64,
        discourse_style_accuracy: disc_correct as f64 / disc_pred.len() as f64,
        per_utterance,
    })
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// A summary line followed by one line per utterance.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(
            w,
            "utterance_id,phonemes,lpe_mse,pitch_mse,energy_mse,style_correct"
        )?;
        writeln!(
            w,
            "ALL,{},{:e},{:e},{:e},{}",
            self.per_utterance.iter().map(|u| u.phonemes).sum::<usize>(),
            self.lpe_mse,
            self.pitch_mse,
            self.energy_mse,
            self.utterance_style_accuracy
        )?;
        for u in &self.per_utterance {
            writeln!(
                w,
                "{},{},{:e},{:e},{:e},{}",
                u.utterance_id, u.phonemes, u.lpe_mse, u.pitch_mse, u.energy_mse, u.style_correct
            )?;
        }
        Ok(())
    }
}
