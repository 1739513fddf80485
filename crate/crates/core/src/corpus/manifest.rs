//! Line-delimited JSON manifest, one record per utterance.
//!
//! Canonical form: keys sorted, no insignificant whitespace, LF endings.

use std::collections::HashSet;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{
    assign_dialogue_flags, Discourse, PhonemeToken, QuoteConfig, Utterance, WordKind, WordToken,
    SEPARATOR,
};
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    discourse_id: String,
    #[serde(default)]
    discourse_style_id: Option<usize>,
    raw_text: String,
    speaker_id: usize,
    style_id: usize,
    utterance_index: usize,
    words: Vec<RecordWord>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordWord {
    kind: WordKind,
    phoneme_symbols: Vec<String>,
    surface: String,
    tone: u8,
}

/// Optional id ranges; ids at or above a bound are rejected.
#[derive(Debug, Clone, Copy, Default)]
pub struct ManifestOptions {
    pub num_speakers: Option<usize>,
    pub num_styles: Option<usize>,
}

fn record_to_utterance(rec: &Record, line: usize) -> Result<Utterance> {
    let words = rec
        .words
        .iter()
        .map(|w| match w.kind {
            WordKind::Lexical => WordToken::lexical(&w.surface, &w.phoneme_symbols, w.tone),
            WordKind::Punctuation => {
                let mut t = WordToken::punctuation(&w.surface);
                t.tone = w.tone;
                t.phonemes = w
                    .phoneme_symbols
                    .iter()
                    .map(|s| PhonemeToken {
                        symbol: s.clone(),
                        tone_label: 0,
                        is_separator: false,
                        is_silent: false,
                    })
                    .collect();
                t
            }
            WordKind::Separator => {
                let mut t = WordToken::separator();
                if w.phoneme_symbols != [SEPARATOR] {
                    t.phonemes.clear();
                }
                t.surface = w.surface.clone();
                t.tone = w.tone;
                t
            }
        })
        .collect();
    let utt = Utterance {
        id: Discourse::utterance_id(&rec.discourse_id, rec.utterance_index),
        words,
        speaker_id: rec.speaker_id,
        style_label: rec.style_id,
        raw_text: rec.raw_text.clone(),
    };
    utt.validate()
        .map_err(|e| Error::parse(line, e.to_string()))?;
    Ok(assign_dialogue_flags(&utt, &QuoteConfig::default()))
}

/// Reads a manifest. Records of one discourse must be contiguous and ordered
/// by `utterance_index` starting at 0.
pub fn parse_manifest<R: BufRead>(reader: R, opts: ManifestOptions) -> Result<Vec<Discourse>> {
    let mut out: Vec<Discourse> = Vec::new();
    let mut seen_discourses: HashSet<String> = HashSet::new();
    let mut seen_utterances: HashSet<String> = HashSet::new();
    let mut explicit_style: Option<usize> = None;
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record =
            serde_json::from_str(&line).map_err(|e| Error::parse(line_no, e.to_string()))?;
        if let Some(n) = opts.num_speakers {
            if rec.speaker_id >= n {
                return Err(Error::parse(
                    line_no,
                    format!("unknown speaker id {}", rec.speaker_id),
                ));
            }
        }
        if let Some(n) = opts.num_styles {
            let bad = rec.style_id >= n || rec.discourse_style_id.is_some_and(|s| s >= n);
            if bad {
                return Err(Error::parse(line_no, "unknown style id"));
            }
        }
        let utt = record_to_utterance(&rec, line_no)?;
        if !seen_utterances.insert(utt.id.clone()) {
            return Err(Error::parse(
                line_no,
                format!("duplicate utterance id {}", utt.id),
            ));
        }
        let continues = out.last().is_some_and(|d| d.id == rec.discourse_id);
        if continues {
            let d = out.last_mut().expect("checked above");
            if rec.utterance_index != d.utterances.len() {
                return Err(Error::parse(
                    line_no,
                    format!(
                        "utterance_index {} out of order (expected {})",
                        rec.utterance_index,
                        d.utterances.len()
                    ),
                ));
            }
            match (explicit_style, rec.discourse_style_id) {
                (Some(a), Some(b)) if a != b => {
                    return Err(Error::parse(line_no, "inconsistent discourse_style_id"));
                }
                (None, Some(_)) | (Some(_), None) => {
                    return Err(Error::parse(
                        line_no,
                        "discourse_style_id set on some records only",
                    ));
                }
                (None, None) if d.style_label != rec.style_id => {
                    return Err(Error::parse(
                        line_no,
                        "utterance styles differ within a discourse without discourse_style_id",
                    ));
                }
                _ => {}
            }
            d.utterances.push(utt);
        } else {
            if !seen_discourses.insert(rec.discourse_id.clone()) {
                return Err(Error::parse(
                    line_no,
                    format!(
                        "records of discourse {} are not contiguous",
                        rec.discourse_id
                    ),
                ));
            }
            if rec.utterance_index != 0 {
                return Err(Error::parse(
                    line_no,
                    format!("discourse {} does not start at index 0", rec.discourse_id),
                ));
            }
            explicit_style = rec.discourse_style_id;
            out.push(Discourse {
                id: rec.discourse_id.clone(),
                utterances: vec![utt],
                style_label: rec.discourse_style_id.unwrap_or(rec.style_id),
            });
        }
    }
    Ok(out)
}

/// Writes the canonical manifest form.
pub fn write_manifest<W: Write>(discourses: &[Discourse], mut writer: W) -> Result<()> {
    for d in discourses {
        for (index, u) in d.utterances.iter().enumerate() {
            let rec = Record {
                discourse_id: d.id.clone(),
                discourse_style_id: Some(d.style_label),
                raw_text: u.raw_text.clone(),
                speaker_id: u.speaker_id,
                style_id: u.style_label,
                utterance_index: index,
                words: u
                    .words
                    .iter()
                    .map(|w| RecordWord {
                        kind: w.kind,
                        phoneme_symbols: w.phonemes.iter().map(|p| p.symbol.clone()).collect(),
                        surface: w.surface.clone(),
                        tone: w.tone,
                    })
                    .collect(),
            };
            // Going through `Value` sorts object keys.
            let value = serde_json::to_value(&rec)?;
            writer.write_all(serde_json::to_string(&value)?.as_bytes())?;
            writer.write_all(b"\n")?;
        }
    }
    Ok(())
}
