//! Phoneme-level acoustic targets from frame tracks and forced alignments.
//!
//! Pitch is the mean natural-log F0 over the voiced frames of a phoneme's
//! interval (0 when no frame is voiced); energy is the plain mean over all
//! frames. A separator takes the features of a `silence` interval found at
//! its position, and is all-zero otherwise.

use std::io::{BufRead, Write};

use crate::corpus::{Utterance, WordKind};
use crate::error::{Error, Result};

/// Reserved alignment label for pauses.
pub const SILENCE: &str = "silence";

pub const LPE_DIM: usize = 3;

pub type Lpe = [f64; LPE_DIM];

#[derive(Debug, Clone, PartialEq)]
pub struct FrameTrack {
    pub utterance_id: String,
    pub frame_period_ms: f64,
    /// 0 marks an unvoiced frame.
    pub f0_hz: Vec<f64>,
    pub energy: Vec<f64>,
}

impl FrameTrack {
    pub fn len(&self) -> usize {
        self.f0_hz.len()
    }

    pub fn is_empty(&self) -> bool {
        self.f0_hz.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.frame_period_ms > 0.0) {
            return Err(Error::Validation(format!(
                "{}: frame period must be positive",
                self.utterance_id
            )));
        }
        if self.f0_hz.len() != self.energy.len() {
            return Err(Error::length(
                format!("{} energy frames", self.utterance_id),
                self.f0_hz.len(),
                self.energy.len(),
            ));
        }
        let bad = self
            .f0_hz
            .iter()
            .chain(&self.energy)
            .any(|v| !v.is_finite() || *v < 0.0);
        if bad {
            return Err(Error::Validation(format!(
                "{}: frame values must be finite and non-negative",
                self.utterance_id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Interval {
    pub label: String,
    pub start_frame: usize,
    pub end_frame: usize,
}

impl Interval {
    pub fn new(label: &str, start_frame: usize, end_frame: usize) -> Self {
        Self {
            label: label.to_string(),
            start_frame,
            end_frame,
        }
    }

    pub fn is_silence(&self) -> bool {
        self.label == SILENCE
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignmentTrack {
    pub utterance_id: String,
    pub intervals: Vec<Interval>,
}

impl AlignmentTrack {
    pub fn validate(&self) -> Result<()> {
        let mut prev_end = 0;
        for (i, iv) in self.intervals.iter().enumerate() {
            if iv.start_frame >= iv.end_frame {
                return Err(Error::Validation(format!(
                    "{}: interval {i} is empty or reversed",
                    self.utterance_id
                )));
            }
            if iv.start_frame < prev_end {
                return Err(Error::Validation(format!(
                    "{}: interval {i} overlaps its predecessor",
                    self.utterance_id
                )));
            }
            prev_end = iv.end_frame;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhonemeTargets {
    pub utterance_id: String,
    pub pitch: Vec<f64>,
    pub energy: Vec<f64>,
    pub lpe: Vec<Lpe>,
}

impl PhonemeTargets {
    pub fn zeros(utterance_id: &str, n: usize) -> Self {
        Self {
            utterance_id: utterance_id.to_string(),
            pitch: vec![0.0; n],
            energy: vec![0.0; n],
            lpe: vec![[0.0; LPE_DIM]; n],
        }
    }

    pub fn len(&self) -> usize {
        self.pitch.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pitch.is_empty()
    }

    /// The 5-dim feature row `(pitch, energy, lpe1, lpe2, lpe3)`.
    pub fn row(&self, i: usize) -> [f64; 5] {
        let l = self.lpe[i];
        [self.pitch[i], self.energy[i], l[0], l[1], l[2]]
    }

    pub fn check_len(&self, n: usize) -> Result<()> {
        for (what, len) in [
            ("pitch", self.pitch.len()),
            ("energy", self.energy.len()),
            ("lpe", self.lpe.len()),
        ] {
            if len != n {
                return Err(Error::length(
                    format!("{} {what}", self.utterance_id),
                    n,
                    len,
                ));
            }
        }
        Ok(())
    }
}

/// Where a phoneme's features come from after alignment matching.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhonemeSpan {
    Frames {
        start: usize,
        end: usize,
    },
    /// A separator with no pause: all features are zero.
    NoPause,
}

/// Walks the utterance phonemes and the alignment intervals in lock-step.
///
/// Silence intervals that do not sit at a separator position (leading,
/// trailing, around punctuation, inside a word) are skipped.
pub fn match_alignment(utt: &Utterance, align: &AlignmentTrack) -> Result<Vec<PhonemeSpan>> {
    align.validate()?;
    let ivs = &align.intervals;
    let mut k = 0usize;
    let mut spans = Vec::with_capacity(utt.phoneme_count());
    let mut index = 0usize;
    for word in &utt.words {
        match word.kind {
            WordKind::Punctuation => {
                while ivs.get(k).is_some_and(Interval::is_silence) {
                    k += 1;
                }
            }
            WordKind::Separator => {
                if ivs.get(k).is_some_and(Interval::is_silence) {
                    if ivs.get(k + 1).is_some_and(Interval::is_silence) {
                        return Err(Error::AlignmentMismatch {
                            index,
                            reason: "two consecutive silence intervals at one separator".into(),
                        });
                    }
                    spans.push(PhonemeSpan::Frames {
                        start: ivs[k].start_frame,
                        end: ivs[k].end_frame,
                    });
                    k += 1;
                } else {
                    spans.push(PhonemeSpan::NoPause);
                }
                index += 1;
            }
            WordKind::Lexical => {
                for ph in &word.phonemes {
                    while ivs.get(k).is_some_and(Interval::is_silence) {
                        k += 1;
                    }
                    let Some(iv) = ivs.get(k) else {
                        return Err(Error::AlignmentMismatch {
                            index,
                            reason: format!("no interval left for `{}`", ph.symbol),
                        });
                    };
                    if iv.label != ph.symbol {
                        return Err(Error::AlignmentMismatch {
                            index,
                            reason: format!("expected `{}`, interval is `{}`", ph.symbol, iv.label),
                        });
                    }
                    spans.push(PhonemeSpan::Frames {
                        start: iv.start_frame,
                        end: iv.end_frame,
                    });
                    k += 1;
                    index += 1;
                }
            }
        }
    }
    if let Some(extra) = ivs[k..].iter().find(|iv| !iv.is_silence()) {
        return Err(Error::AlignmentMismatch {
            index,
            reason: format!("unmatched trailing interval `{}`", extra.label),
        });
    }
    Ok(spans)
}

/// Mean log-F0 over voiced frames and mean energy over all frames of
/// `[start, end)`.
pub fn interval_means(track: &FrameTrack, start: usize, end: usize) -> Result<(f64, f64)> {
    if end > track.len() || start >= end {
        return Err(Error::Validation(format!(
            "{}: interval [{start}, {end}) outside a {}-frame track",
            track.utterance_id,
            track.len()
        )));
    }
    let (mut log_sum, mut voiced) = (0.0, 0usize);
    for &f in &track.f0_hz[start..end] {
        if f > 0.0 {
            log_sum += f.ln();
            voiced += 1;
        }
    }
    let pitch = if voiced == 0 {
        0.0
    } else {
        log_sum / voiced as f64
    };
    let energy = track.energy[start..end].iter().sum::<f64>() / (end - start) as f64;
    Ok((pitch, energy))
}

fn spans_to_features(track: &FrameTrack, spans: &[PhonemeSpan]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut pitch = Vec::with_capacity(spans.len());
    let mut energy = Vec::with_capacity(spans.len());
    for span in spans {
        let (p, e) = match *span {
            PhonemeSpan::Frames { start, end } => interval_means(track, start, end)?,
            PhonemeSpan::NoPause => (0.0, 0.0),
        };
        pitch.push(p);
        energy.push(e);
    }
    Ok((pitch, energy))
}

/// Per-phoneme pitch and energy for the whole utterance (length `N`), with
/// the separator rule applied at separator positions.
pub fn aggregate_pitch_energy(
    utt: &Utterance,
    track: &FrameTrack,
    align: &AlignmentTrack,
) -> Result<(Vec<f64>, Vec<f64>)> {
    track.validate()?;
    let spans = match_alignment(utt, align)?;
    spans_to_features(track, &spans)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeparatorFeature {
    pub pitch: f64,
    pub energy: f64,
    pub is_silent: bool,
}

/// Features of each separator in utterance order.
pub fn apply_separator_rule(
    utt: &Utterance,
    align: &AlignmentTrack,
    track: &FrameTrack,
) -> Result<Vec<SeparatorFeature>> {
    track.validate()?;
    let spans = match_alignment(utt, align)?;
    utt.phonemes()
        .zip(&spans)
        .filter(|(p, _)| p.is_separator)
        .map(|(_, span)| match *span {
            PhonemeSpan::Frames { start, end } => {
                let (pitch, energy) = interval_means(track, start, end)?;
                Ok(SeparatorFeature {
                    pitch,
                    energy,
                    is_silent: true,
                })
            }
            PhonemeSpan::NoPause => Ok(SeparatorFeature {
                pitch: 0.0,
                energy: 0.0,
                is_silent: false,
            }),
        })
        .collect()
}

/// Copy of `utt` with `is_silent` set on every separator phoneme.
pub fn mark_silence(utt: &Utterance, align: &AlignmentTrack) -> Result<Utterance> {
    let spans = match_alignment(utt, align)?;
    let mut out = utt.clone();
    let phonemes = out.words.iter_mut().flat_map(|w| w.phonemes.iter_mut());
    for (ph, span) in phonemes.zip(spans) {
        if ph.is_separator {
            ph.is_silent = matches!(span, PhonemeSpan::Frames { .. });
        }
    }
    Ok(out)
}

/// Positions of separators without a pause; their targets are forced to 0.
pub fn non_silent_separators(utt: &Utterance) -> Vec<bool> {
    utt.phonemes()
        .map(|p| p.is_separator && !p.is_silent)
        .collect()
}

/// Fills `targets.lpe` from externally extracted rows. `utt` must already
/// carry silence flags (see [`mark_silence`]).
pub fn attach_lpe_targets(
    mut targets: PhonemeTargets,
    utt: &Utterance,
    rows: &[Lpe],
) -> Result<PhonemeTargets> {
    let n = utt.phoneme_count();
    if rows.len() != n {
        return Err(Error::length(
            format!("{} lpe rows", targets.utterance_id),
            n,
            rows.len(),
        ));
    }
    for (i, row) in rows.iter().enumerate() {
        if row.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Validation(format!(
                "{}: lpe row {i} has a component outside [0, 1]: {row:?}",
                targets.utterance_id
            )));
        }
    }
    targets.lpe = rows.to_vec();
    for (lpe, zero) in targets.lpe.iter_mut().zip(non_silent_separators(utt)) {
        if zero {
            *lpe = [0.0; LPE_DIM];
        }
    }
    Ok(targets)
}

/// Full per-utterance target assembly.
pub fn build_targets(
    utt: &Utterance,
    track: &FrameTrack,
    align: &AlignmentTrack,
    lpe_rows: &[Lpe],
) -> Result<(Utterance, PhonemeTargets)> {
    let marked = mark_silence(utt, align)?;
    let (pitch, energy) = aggregate_pitch_energy(&marked, track, align)?;
    let targets = PhonemeTargets {
        utterance_id: utt.id.clone(),
        pitch,
        energy,
        lpe: vec![[0.0; LPE_DIM]; marked.phoneme_count()],
    };
    let targets = attach_lpe_targets(targets, &marked, lpe_rows)?;
    Ok((marked, targets))
}

/// `%.9g`-style rendering: 9 significant digits, trailing zeros trimmed.
pub fn format_sig9(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    if !v.is_finite() {
        return format!("{v}");
    }
    let sci = format!("{v:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: &str| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if (-5..9).contains(&exp) {
        trim(&format!("{:.*}", (8 - exp) as usize, v))
    } else {
        format!("{}e{exp}", trim(mantissa))
    }
}

fn header_fields<'a>(line: Option<&'a str>, magic: &str, count: usize) -> Result<Vec<&'a str>> {
    let line = line.ok_or_else(|| Error::parse(1, "missing header"))?;
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.first() != Some(&magic) {
        return Err(Error::parse(1, format!("expected `{magic}` header")));
    }
    if fields.get(1) != Some(&"v1") {
        return Err(Error::parse(
            1,
            format!("unsupported version `{}`", fields.get(1).unwrap_or(&"")),
        ));
    }
    if fields.len() != count {
        return Err(Error::parse(1, format!("header needs {count} fields")));
    }
    Ok(fields)
}

fn parse_num<T: std::str::FromStr>(s: &str, line: usize) -> Result<T> {
    s.parse()
        .map_err(|_| Error::parse(line, format!("bad number `{s}`")))
}

fn read_lines<R: BufRead>(reader: R) -> Result<Vec<String>> {
    let mut lines = Vec::new();
    for l in reader.lines() {
        let l = l?;
        if !l.trim().is_empty() {
            lines.push(l);
        }
    }
    Ok(lines)
}

fn row_values(line: &str, line_no: usize, width: usize) -> Result<Vec<f64>> {
    let vals: Vec<&str> = line.split_whitespace().collect();
    if vals.len() != width {
        return Err(Error::parse(line_no, format!("expected {width} values")));
    }
    vals.iter().map(|v| parse_num(v, line_no)).collect()
}

pub fn read_frame_track<R: BufRead>(reader: R) -> Result<FrameTrack> {
    let lines = read_lines(reader)?;
    let h = header_fields(lines.first().map(String::as_str), "PROSO-FRAMES", 4)?;
    let mut track = FrameTrack {
        utterance_id: h[2].to_string(),
        frame_period_ms: parse_num(h[3], 1)?,
        f0_hz: Vec::with_capacity(lines.len()),
        energy: Vec::with_capacity(lines.len()),
    };
    for (i, line) in lines.iter().enumerate().skip(1) {
        let v = row_values(line, i + 1, 2)?;
        track.f0_hz.push(v[0]);
        track.energy.push(v[1]);
    }
    track.validate()?;
    Ok(track)
}

pub fn write_frame_track<W: Write>(track: &FrameTrack, mut w: W) -> Result<()> {
    writeln!(
        w,
        "PROSO-FRAMES v1 {} {}",
        track.utterance_id, track.frame_period_ms
    )?;
    for (f, e) in track.f0_hz.iter().zip(&track.energy) {
        writeln!(w, "{f} {e}")?;
    }
    Ok(())
}

pub fn read_alignment<R: BufRead>(reader: R) -> Result<AlignmentTrack> {
    let lines = read_lines(reader)?;
    let h = header_fields(lines.first().map(String::as_str), "PROSO-ALIGN", 3)?;
    let mut align = AlignmentTrack {
        utterance_id: h[2].to_string(),
        intervals: Vec::new(),
    };
    for (i, line) in lines.iter().enumerate().skip(1) {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 3 {
            return Err(Error::parse(i + 1, "expected `<label> <start> <end>`"));
        }
        align.intervals.push(Interval {
            label: f[0].to_string(),
            start_frame: parse_num(f[1], i + 1)?,
            end_frame: parse_num(f[2], i + 1)?,
        });
    }
    align.validate()?;
    Ok(align)
}

pub fn write_alignment<W: Write>(align: &AlignmentTrack, mut w: W) -> Result<()> {
    writeln!(w, "PROSO-ALIGN v1 {}", align.utterance_id)?;
    for iv in &align.intervals {
        writeln!(w, "{} {} {}", iv.label, iv.start_frame, iv.end_frame)?;
    }
    Ok(())
}

/// Reads raw LPE rows: header `PROSO-LPE v1 <utterance_id> <N>`, then
/// `<l1> <l2> <l3>` per phoneme.
pub fn read_lpe_file<R: BufRead>(reader: R) -> Result<(String, Vec<Lpe>)> {
    let lines = read_lines(reader)?;
    let h = header_fields(lines.first().map(String::as_str), "PROSO-LPE", 4)?;
    let n: usize = parse_num(h[3], 1)?;
    if lines.len() - 1 != n {
        return Err(Error::parse(
            lines.len(),
            format!("header announces {n} rows, found {}", lines.len() - 1),
        ));
    }
    let rows = lines[1..]
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let v = row_values(l, i + 2, LPE_DIM)?;
            Ok([v[0], v[1], v[2]])
        })
        .collect::<Result<_>>()?;
    Ok((h[2].to_string(), rows))
}

pub fn write_lpe_file<W: Write>(utterance_id: &str, rows: &[Lpe], mut w: W) -> Result<()> {
    writeln!(w, "PROSO-LPE v1 {utterance_id} {}", rows.len())?;
    for r in rows {
        writeln!(w, "{:e} {:e} {:e}", r[0], r[1], r[2])?;
    }
    Ok(())
}

/// Reads a `PROSO-FEAT v1` file. Values are not range-checked so raw model
/// predictions can use the same format.
pub fn read_feature_file<R: BufRead>(reader: R) -> Result<PhonemeTargets> {
    let lines = read_lines(reader)?;
    let h = header_fields(lines.first().map(String::as_str), "PROSO-FEAT", 4)?;
    let n: usize = parse_num(h[3], 1)?;
    if lines.len() - 1 != n {
        return Err(Error::parse(
            lines.len(),
            format!("header announces {n} rows, found {}", lines.len() - 1),
        ));
    }
    let mut t = PhonemeTargets::zeros(h[2], n);
    for (i, line) in lines[1..].iter().enumerate() {
        let v = row_values(line, i + 2, 5)?;
        t.pitch[i] = v[0];
        t.energy[i] = v[1];
        t.lpe[i] = [v[2], v[3], v[4]];
    }
    Ok(t)
}

pub fn write_feature_file<W: Write>(t: &PhonemeTargets, mut w: W) -> Result<()> {
    t.check_len(t.pitch.len())?;
    writeln!(w, "PROSO-FEAT v1 {} {}", t.utterance_id, t.len())?;
    for i in 0..t.len() {
        let row = t.row(i).map(format_sig9);
        writeln!(w, "{}", row.join(" "))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{tokenize_and_separate, PinyinEntry};

    fn two_words() -> Utterance {
        let mut u = tokenize_and_separate(
            "他好",
            &[
                PinyinEntry::new("他", &["t", "a"], 1),
                PinyinEntry::new("好", &["h", "ao"], 3),
            ],
        )
        .unwrap();
        u.id = "u1".into();
        u
    }

    fn track(f0: Vec<f64>, energy: Vec<f64>) -> FrameTrack {
        FrameTrack {
            utterance_id: "u1".into(),
            frame_period_ms: 10.0,
            f0_hz: f0,
            energy,
        }
    }

    fn align(ivs: &[(&str, usize, usize)]) -> AlignmentTrack {
        AlignmentTrack {
            utterance_id: "u1".into(),
            intervals: ivs
                .iter()
                .map(|&(l, s, e)| Interval::new(l, s, e))
                .collect(),
        }
    }

    #[test]
    fn constant_f0_gives_log() {
        let t = track(vec![100.0; 4], vec![1.0; 4]);
        let (p, e) = interval_means(&t, 0, 4).unwrap();
        assert!((p - 100f64.ln()).abs() < 1e-12);
        assert!((p - 4.6052).abs() < 1e-4);
        assert_eq!(e, 1.0);
    }

    #[test]
    fn unvoiced_phoneme_has_zero_pitch() {
        let t = track(vec![0.0; 3], vec![0.5, 0.7, 0.9]);
        let (p, e) = interval_means(&t, 0, 3).unwrap();
        assert_eq!(p, 0.0);
        assert!((e - 0.7).abs() < 1e-15);
    }

    #[test]
    fn silent_separator_uses_interval_mean() {
        let utt = two_words();
        let mut energy = vec![2.0; 16];
        energy[4..10].copy_from_slice(&[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        let mut f0 = vec![120.0; 16];
        f0[4..10].fill(0.0);
        let a = align(&[
            ("t", 0, 2),
            ("a", 2, 4),
            ("silence", 4, 10),
            ("h", 10, 13),
            ("ao", 13, 16),
        ]);
        let t = track(f0, energy);
        let seps = apply_separator_rule(&utt, &a, &t).unwrap();
        assert_eq!(seps.len(), 1);
        assert!(seps[0].is_silent);
        assert!((seps[0].energy - 0.35).abs() < 1e-12);
        assert_eq!(seps[0].pitch, 0.0);

        let (p, e) = aggregate_pitch_energy(&utt, &t, &a).unwrap();
        assert_eq!(p.len(), 5);
        assert!((e[2] - 0.35).abs() < 1e-12);
    }

    #[test]
    fn no_pause_separator_is_zero() {
        let utt = two_words();
        let a = align(&[("t", 0, 2), ("a", 2, 4), ("h", 4, 6), ("ao", 6, 8)]);
        let t = track(vec![150.0; 8], vec![3.0; 8]);
        let seps = apply_separator_rule(&utt, &a, &t).unwrap();
        assert_eq!(
            seps,
            [SeparatorFeature {
                pitch: 0.0,
                energy: 0.0,
                is_silent: false
            }]
        );
        let (marked, targets) = build_targets(&utt, &t, &a, &[[0.3, 0.4, 0.5]; 5]).unwrap();
        assert_eq!(targets.lpe[2], [0.0; 3]);
        assert_eq!(targets.lpe[1], [0.3, 0.4, 0.5]);
        assert!(!marked.words[1].phonemes[0].is_silent);
    }

    #[test]
    fn double_silence_is_malformed() {
        let utt = two_words();
        let a = align(&[
            ("t", 0, 2),
            ("a", 2, 4),
            ("silence", 4, 6),
            ("silence", 6, 8),
            ("h", 8, 10),
            ("ao", 10, 12),
        ]);
        let t = track(vec![150.0; 12], vec![3.0; 12]);
        assert!(matches!(
            apply_separator_rule(&utt, &a, &t),
            Err(Error::AlignmentMismatch { index: 2, .. })
        ));
    }

    #[test]
    fn missing_phoneme_names_index() {
        let utt = two_words();
        let a = align(&[("t", 0, 2), ("a", 2, 4), ("h", 4, 6)]);
        let t = track(vec![150.0; 8], vec![3.0; 8]);
        assert!(matches!(
            aggregate_pitch_energy(&utt, &t, &a),
            Err(Error::AlignmentMismatch { index: 4, .. })
        ));
        let a = align(&[("t", 0, 2), ("x", 2, 4), ("h", 4, 6), ("ao", 6, 8)]);
        assert!(matches!(
            aggregate_pitch_energy(&utt, &t, &a),
            Err(Error::AlignmentMismatch { index: 1, .. })
        ));
    }

    #[test]
    fn short_track_rejected() {
        let utt = two_words();
        let a = align(&[("t", 0, 2), ("a", 2, 4), ("h", 4, 6), ("ao", 6, 9)]);
        let t = track(vec![150.0; 8], vec![3.0; 8]);
        assert!(aggregate_pitch_energy(&utt, &t, &a).is_err());
    }

    #[test]
    fn lpe_rows_validated() {
        let utt = two_words();
        let t = PhonemeTargets::zeros("u1", 5);
        let ok = [[0.1, 0.2, 0.3]; 5];
        let got = attach_lpe_targets(t.clone(), &mark_all_silent(&utt), &ok).unwrap();
        assert_eq!(got.lpe, ok.to_vec());
        let mut bad = ok;
        bad[3][1] = 1.2;
        assert!(matches!(
            attach_lpe_targets(t.clone(), &utt, &bad),
            Err(Error::Validation(_))
        ));
        assert!(matches!(
            attach_lpe_targets(t, &utt, &ok[..3]),
            Err(Error::LengthMismatch { .. })
        ));
    }

    fn mark_all_silent(u: &Utterance) -> Utterance {
        let mut u = u.clone();
        for w in &mut u.words {
            for p in &mut w.phonemes {
                p.is_silent = p.is_separator;
            }
        }
        u
    }

    #[test]
    fn sig9_formatting() {
        assert_eq!(format_sig9(0.0), "0");
        assert_eq!(format_sig9(-0.0), "0");
        assert_eq!(format_sig9(1.0), "1");
        assert_eq!(format_sig9(100f64.ln()), "4.60517019");
        assert_eq!(format_sig9(0.000123456789123), "0.000123456789");
        assert_eq!(format_sig9(1.5e-7), "1.5e-7");
        assert_eq!(format_sig9(123456789012.0), "1.23456789e11");
        assert_eq!(format_sig9(-2.5), "-2.5");
        assert_eq!(format_sig9(9.9999999999), "10");
    }

    #[test]
    fn empty_feature_file_is_header_only() {
        let t = PhonemeTargets::zeros("u0", 0);
        let mut buf = Vec::new();
        write_feature_file(&t, &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf.clone()).unwrap(),
            "PROSO-FEAT v1 u0 0\n"
        );
        assert_eq!(read_feature_file(buf.as_slice()).unwrap(), t);
    }

    #[test]
    fn feature_file_canonical_round_trip() {
        let fixture = "PROSO-FEAT v1 u1 3\n4.60517019 0.35 0.1 0.2 0.3\n0 0 0 0 0\n5.1 1.25 1 0 0.999999999\n";
        let t = read_feature_file(fixture.as_bytes()).unwrap();
        let mut buf = Vec::new();
        write_feature_file(&t, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), fixture);
    }

    #[test]
    fn feature_file_errors() {
        assert!(matches!(
            read_feature_file("PROSO-FEAT v2 u1 0\n".as_bytes()),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(matches!(
            read_feature_file("PROSO-FEAT v1 u1 2\n0 0 0 0 0\n".as_bytes()),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn frame_and_alignment_round_trip() {
        let t = track(vec![0.0, 101.5, 99.25], vec![0.1, 0.2, 0.30000000000000004]);
        let mut buf = Vec::new();
        write_frame_track(&t, &mut buf).unwrap();
        assert_eq!(read_frame_track(buf.as_slice()).unwrap(), t);

        let a = align(&[("silence", 0, 3), ("t", 3, 5)]);
        let mut buf = Vec::new();
        write_alignment(&a, &mut buf).unwrap();
        assert_eq!(read_alignment(buf.as_slice()).unwrap(), a);
        assert!(read_alignment("PROSO-ALIGN v1 u\nt 3 2\n".as_bytes()).is_err());
    }
}
