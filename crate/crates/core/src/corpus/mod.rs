//! Text-side data model: discourses, utterances, words and phonemes.
//!
//! Words arrive pre-segmented with their pinyin annotation. Tokenization
//! interleaves a `/` separator word between every pair of adjacent lexical
//! words; punctuation stays in the word sequence with zero phonemes.

mod manifest;

pub use manifest::{parse_manifest, write_manifest, ManifestOptions};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Symbol of the inter-word separator pseudo-phoneme.
pub const SEPARATOR: &str = "/";

/// Largest tone label: 1..=4 are the Mandarin tones, 5 is neutral, 0 unset.
pub const MAX_TONE: u8 = 5;

/// Number of rows in a tone embedding table.
pub const TONE_CLASSES: usize = MAX_TONE as usize + 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhonemeToken {
    pub symbol: String,
    pub tone_label: u8,
    pub is_separator: bool,
    /// Only meaningful on separators; filled in from the alignment.
    pub is_silent: bool,
}

impl PhonemeToken {
    pub fn separator() -> Self {
        Self {
            symbol: SEPARATOR.to_string(),
            tone_label: 0,
            is_separator: true,
            is_silent: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WordKind {
    Lexical,
    Punctuation,
    Separator,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WordToken {
    pub surface: String,
    pub kind: WordKind,
    pub phonemes: Vec<PhonemeToken>,
    pub tone: u8,
    pub dialogue_flag: u8,
}

impl WordToken {
    pub fn lexical(surface: &str, symbols: &[String], tone: u8) -> Self {
        let last = symbols.len().saturating_sub(1);
        let phonemes = symbols
            .iter()
            .enumerate()
            .map(|(i, s)| PhonemeToken {
                symbol: s.clone(),
                tone_label: if i == last { tone } else { 0 },
                is_separator: false,
                is_silent: false,
            })
            .collect();
        Self {
            surface: surface.to_string(),
            kind: WordKind::Lexical,
            phonemes,
            tone,
            dialogue_flag: 0,
        }
    }

    pub fn punctuation(surface: &str) -> Self {
        Self {
            surface: surface.to_string(),
            kind: WordKind::Punctuation,
            phonemes: Vec::new(),
            tone: 0,
            dialogue_flag: 0,
        }
    }

    pub fn separator() -> Self {
        Self {
            surface: SEPARATOR.to_string(),
            kind: WordKind::Separator,
            phonemes: vec![PhonemeToken::separator()],
            tone: 0,
            dialogue_flag: 0,
        }
    }

    /// Phoneme length `p_i`: 0 for punctuation, 1 for a separator.
    pub fn phoneme_len(&self) -> usize {
        self.phonemes.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Utterance {
    pub id: String,
    pub words: Vec<WordToken>,
    pub speaker_id: usize,
    pub style_label: usize,
    pub raw_text: String,
}

impl Utterance {
    /// Total phoneme count `N = Σ p_i`.
    pub fn phoneme_count(&self) -> usize {
        self.words.iter().map(WordToken::phoneme_len).sum()
    }

    pub fn phoneme_lengths(&self) -> Vec<usize> {
        self.words.iter().map(WordToken::phoneme_len).collect()
    }

    pub fn phonemes(&self) -> impl Iterator<Item = &PhonemeToken> {
        self.words.iter().flat_map(|w| w.phonemes.iter())
    }

    /// Index of the owning word for every phoneme position.
    pub fn phoneme_word_index(&self) -> Vec<usize> {
        self.words
            .iter()
            .enumerate()
            .flat_map(|(i, w)| std::iter::repeat_n(i, w.phoneme_len()))
            .collect()
    }

    pub fn lexical_count(&self) -> usize {
        self.words
            .iter()
            .filter(|w| w.kind == WordKind::Lexical)
            .count()
    }

    /// Checks the structural invariants of the word sequence.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Validation(format!("utterance {}: {msg}", self.id)));
        for (i, w) in self.words.iter().enumerate() {
            match w.kind {
                WordKind::Punctuation if !w.phonemes.is_empty() => {
                    return fail(format!("punctuation word {i} has phonemes"));
                }
                WordKind::Lexical if w.phonemes.is_empty() => {
                    return fail(format!("lexical word {i} has no phonemes"));
                }
                WordKind::Separator
                    if w.phonemes.len() != 1 || w.phonemes[0].symbol != SEPARATOR =>
                {
                    return fail(format!("separator word {i} must carry exactly one `/`"));
                }
                _ => {}
            }
            if w.tone > MAX_TONE {
                return fail(format!("word {i} has tone {} outside 0..=5", w.tone));
            }
            if w.kind == WordKind::Lexical && w.phonemes.iter().any(|p| p.symbol == SEPARATOR) {
                return fail(format!("lexical word {i} uses the reserved `/` symbol"));
            }
        }
        for (i, pair) in self.words.windows(2).enumerate() {
            if pair[0].kind == WordKind::Lexical && pair[1].kind == WordKind::Lexical {
                return fail(format!("missing separator between words {i} and {}", i + 1));
            }
        }
        for (i, w) in self.words.iter().enumerate() {
            if w.kind != WordKind::Separator {
                continue;
            }
            let prev = i.checked_sub(1).map(|j| self.words[j].kind);
            let next = self.words.get(i + 1).map(|w| w.kind);
            if prev != Some(WordKind::Lexical) || next != Some(WordKind::Lexical) {
                return fail(format!("separator {i} is not between two lexical words"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Discourse {
    pub id: String,
    pub utterances: Vec<Utterance>,
    pub style_label: usize,
}

impl Discourse {
    pub fn utterance_id(discourse_id: &str, index: usize) -> String {
        format!("{discourse_id}_{index:03}")
    }
}

/// One annotated lexical word: surface form, phoneme symbols and word tone.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PinyinEntry {
    pub word: String,
    pub phonemes: Vec<String>,
    pub tone: u8,
}

impl PinyinEntry {
    pub fn new(word: &str, phonemes: &[&str], tone: u8) -> Self {
        Self {
            word: word.to_string(),
            phonemes: phonemes.iter().map(|s| s.to_string()).collect(),
            tone,
        }
    }
}

fn is_punctuation(c: char) -> bool {
    !c.is_alphanumeric() && !c.is_whitespace()
}

/// Splits `raw_text` into lexical words (matched in order against `pinyin`)
/// and single-character punctuation words, then inserts a separator between
/// every two adjacent lexical words.
///
/// The returned utterance has an empty id and speaker/style 0; dialogue flags
/// are left at 0 (see [`assign_dialogue_flags`]).
pub fn tokenize_and_separate(raw_text: &str, pinyin: &[PinyinEntry]) -> Result<Utterance> {
    let mut tokens: Vec<WordToken> = Vec::new();
    let mut rest = raw_text;
    let mut next = 0usize;
    while let Some(c) = rest.chars().next() {
        if c.is_whitespace() {
            rest = &rest[c.len_utf8()..];
            continue;
        }
        if let Some(entry) = pinyin.get(next) {
            if !entry.word.is_empty() && rest.starts_with(entry.word.as_str()) {
                if entry.phonemes.is_empty() {
                    return Err(Error::TokenAlignment {
                        index: next,
                        reason: format!("word `{}` has no phonemes", entry.word),
                    });
                }
                if entry.tone > MAX_TONE {
                    return Err(Error::Validation(format!(
                        "word `{}` has tone {} outside 0..=5",
                        entry.word, entry.tone
                    )));
                }
                tokens.push(WordToken::lexical(&entry.word, &entry.phonemes, entry.tone));
                rest = &rest[entry.word.len()..];
                next += 1;
                continue;
            }
        }
        if is_punctuation(c) {
            tokens.push(WordToken::punctuation(&c.to_string()));
            rest = &rest[c.len_utf8()..];
            continue;
        }
        let found: String = rest.chars().take(8).collect();
        let reason = match pinyin.get(next) {
            Some(e) => format!("expected `{}`, found `{found}`", e.word),
            None => format!("text continues with `{found}` after the last annotated word"),
        };
        return Err(Error::TokenAlignment {
            index: next,
            reason,
        });
    }
    if next < pinyin.len() {
        return Err(Error::TokenAlignment {
            index: next,
            reason: format!("word `{}` not found in text", pinyin[next].word),
        });
    }

    let mut words = Vec::with_capacity(tokens.len() * 2);
    for tok in tokens {
        let adjacent_lexical = words
            .last()
            .is_some_and(|w: &WordToken| w.kind == WordKind::Lexical);
        if adjacent_lexical && tok.kind == WordKind::Lexical {
            words.push(WordToken::separator());
        }
        words.push(tok);
    }
    Ok(Utterance {
        id: String::new(),
        words,
        speaker_id: 0,
        style_label: 0,
        raw_text: raw_text.to_string(),
    })
}

/// Quote characters recognised by [`assign_dialogue_flags`].
#[derive(Debug, Clone)]
pub struct QuoteConfig {
    pub open: Vec<char>,
    pub close: Vec<char>,
    /// Characters that both open and close (e.g. ASCII `"`).
    pub symmetric: Vec<char>,
}

impl Default for QuoteConfig {
    fn default() -> Self {
        Self {
            open: vec!['“'],
            close: vec!['”'],
            symmetric: vec!['"'],
        }
    }
}

/// Flags every word inside a quote pair as dialogue. Quote marks themselves
/// stay 0; a separator takes the flag of the word that follows it. An
/// unmatched opening quote extends to the end of the utterance.
pub fn assign_dialogue_flags(utt: &Utterance, quotes: &QuoteConfig) -> Utterance {
    let mut out = utt.clone();
    let mut stack: Vec<char> = Vec::new();
    for w in out.words.iter_mut() {
        let mut chars = w.surface.chars();
        let quote = match (w.kind, chars.next(), chars.next()) {
            (WordKind::Punctuation, Some(c), None) => Some(c),
            _ => None,
        };
        match quote {
            Some(c) if quotes.symmetric.contains(&c) => {
                if stack.last() == Some(&c) {
                    stack.pop();
                } else {
                    stack.push(c);
                }
                w.dialogue_flag = 0;
            }
            Some(c) if quotes.open.contains(&c) => {
                stack.push(c);
                w.dialogue_flag = 0;
            }
            Some(c) if quotes.close.contains(&c) => {
                if stack.pop().is_none() {
                    log::warn!("utterance {}: closing quote without opener", utt.id);
                }
                w.dialogue_flag = 0;
            }
            _ => w.dialogue_flag = u8::from(!stack.is_empty()),
        }
    }
    if !stack.is_empty() {
        log::warn!(
            "utterance {}: unbalanced quotes, treating dialogue as running to the end",
            utt.id
        );
    }
    for i in (0..out.words.len()).rev() {
        if out.words[i].kind == WordKind::Separator {
            out.words[i].dialogue_flag = out.words.get(i + 1).map_or(0, |w| w.dialogue_flag);
        }
    }
    out
}

/// Per-phoneme tone labels: the word tone on the last phoneme of each lexical
/// word, 0 everywhere else (including separators).
pub fn assign_tone_labels(utt: &Utterance) -> Result<Vec<u8>> {
    let mut tones = Vec::with_capacity(utt.phoneme_count());
    for w in &utt.words {
        if w.tone > MAX_TONE {
            return Err(Error::Validation(format!(
                "word `{}` has tone {} outside 0..=5",
                w.surface, w.tone
            )));
        }
        match w.kind {
            WordKind::Lexical => {
                let p = w.phoneme_len();
                tones.extend(std::iter::repeat_n(0, p.saturating_sub(1)));
                if p > 0 {
                    tones.push(w.tone);
                }
            }
            WordKind::Separator => tones.push(0),
            WordKind::Punctuation => {}
        }
    }
    Ok(tones)
}

/// Per-phoneme dialogue flag, inherited from the owning word.
pub fn phoneme_dialogue_flags(utt: &Utterance) -> Vec<u8> {
    utt.words
        .iter()
        .flat_map(|w| std::iter::repeat_n(w.dialogue_flag, w.phoneme_len()))
        .collect()
}

/// Deterministically splits whole discourses into `(train, test)`. Each split
/// keeps the input order.
pub fn split_by_discourse(
    discourses: &[Discourse],
    test_fraction: f64,
    seed: u64,
) -> Result<(Vec<Discourse>, Vec<Discourse>)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Validation(format!(
            "test fraction {test_fraction} must lie strictly between 0 and 1"
        )));
    }
    let n = discourses.len();
    if n < 2 {
        return Err(Error::Validation(format!(
            "need at least 2 discourses to split, got {n}"
        )));
    }
    let n_test = ((test_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_test = vec![false; n];
    for &i in &order[..n_test] {
        is_test[i] = true;
    }
    let (test, train): (Vec<_>, Vec<_>) = discourses
        .iter()
        .cloned()
        .zip(is_test)
        .partition(|(_, t)| *t);
    Ok((
        train.into_iter().map(|(d, _)| d).collect(),
        test.into_iter().map(|(d, _)| d).collect(),
    ))
}
