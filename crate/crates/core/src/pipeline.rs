//! File-level commands behind the command-line tool.

use std::collections::BTreeSet;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use log::{info, warn};

use crate::checkpoint::Checkpoint;
use crate::config::{Ablation, Config};
use crate::corpus::{
    parse_manifest, split_by_discourse, write_manifest, Discourse, ManifestOptions, Utterance,
};
use crate::error::{Error, Result};
use crate::eval::{self, read_styles, score, true_styles, write_styles, EvalReport, STYLES_FILE};
use crate::features::{
    build_targets, mark_silence, read_alignment, read_feature_file, read_frame_track,
    read_lpe_file, write_feature_file, PhonemeTargets,
};
use crate::synthgen::{self, GeneratorSpec, FEATURES_DIR, MANIFEST_FILE, TEST_FILE, TRAIN_FILE};
use crate::training::{train_stage1, train_stage2, Corpus, History};

pub const PREPARE_REPORT: &str = "prepare_report.txt";
pub const EVAL_JSON: &str = "eval_report.json";
pub const EVAL_CSV: &str = "eval_report.csv";
pub const RAW_DIR: &str = "raw";

pub fn read_manifest(path: &Path) -> Result<Vec<Discourse>> {
    let file = fs::File::open(path)
        .map_err(|e| Error::Validation(format!("cannot open manifest {}: {e}", path.display())))?;
    parse_manifest(BufReader::new(file), ManifestOptions::default())
}

fn open(path: &Path) -> Result<BufReader<fs::File>> {
    fs::File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::Validation(format!("cannot open {}: {e}", path.display())))
}

fn write_feature(dir: &Path, t: &PhonemeTargets) -> Result<()> {
    let mut buf = Vec::new();
    write_feature_file(t, &mut buf)?;
    fs::write(dir.join(format!("{}.feat", t.utterance_id)), buf)?;
    Ok(())
}

fn save_styles(dir: &Path, rows: &[eval::StyleRow]) -> Result<()> {
    let mut buf = Vec::new();
    write_styles(rows, &mut buf)?;
    fs::write(dir.join(STYLES_FILE), buf)?;
    Ok(())
}

/// Writes a synthetic corpus plus the style table of its feature directory.
pub fn cmd_generate(spec: &GeneratorSpec, out: &Path) -> Result<synthgen::GeneratedCorpus> {
    let corpus = synthgen::generate(spec, out)?;
    save_styles(&out.join(FEATURES_DIR), &true_styles(&corpus.discourses))?;
    info!(
        "generated {} discourses ({} train, {} test) in {}",
        corpus.discourses.len(),
        corpus.train.len(),
        corpus.test.len(),
        out.display()
    );
    Ok(corpus)
}

/// Splits a manifest by discourse into `train.jsonl` and `test.jsonl`.
pub fn cmd_split(
    manifest: &Path,
    test_fraction: f64,
    seed: u64,
    out_dir: &Path,
) -> Result<(usize, usize)> {
    let discourses = read_manifest(manifest)?;
    let (train, test) = split_by_discourse(&discourses, test_fraction, seed)?;
    fs::create_dir_all(out_dir)?;
    for (name, part) in [(TRAIN_FILE, &train), (TEST_FILE, &test)] {
        let mut buf = Vec::new();
        write_manifest(part, &mut buf)?;
        fs::write(out_dir.join(name), buf)?;
    }
    Ok((train.len(), test.len()))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PrepareReport {
    pub accepted: Vec<String>,
    pub rejected: Vec<(String, String)>,
}

impl PrepareReport {
    pub fn render(&self) -> String {
        let mut s = format!(
            "accepted {}\nrejected {}\n",
            self.accepted.len(),
            self.rejected.len()
        );
        for (id, why) in &self.rejected {
            s.push_str(&format!("{id}\t{why}\n"));
        }
        s
    }
}

fn prepare_one(u: &Utterance, frames: &Path, align: &Path, lpe: &Path) -> Result<PhonemeTargets> {
    let track = read_frame_track(open(&frames.join(format!("{}.frames", u.id)))?)?;
    let alignment = read_alignment(open(&align.join(format!("{}.align", u.id)))?)?;
    let (lpe_id, rows) = read_lpe_file(open(&lpe.join(format!("{}.lpe", u.id)))?)?;
    for (what, id) in [
        ("frame track", &track.utterance_id),
        ("alignment", &alignment.utterance_id),
        ("LPE file", &lpe_id),
    ] {
        if *id != u.id {
            return Err(Error::Validation(format!("{what} is for `{id}`")));
        }
    }
    let (_, targets) = build_targets(u, &track, &alignment, &rows)?;
    Ok(targets)
}

/// Extracts one feature file per utterance. Rejected utterances are listed
/// with the reason and get no output; `styles.csv` covers the accepted ones.
pub fn cmd_prepare(
    manifest: &Path,
    frames_dir: &Path,
    align_dir: &Path,
    lpe_dir: &Path,
    out_dir: &Path,
) -> Result<PrepareReport> {
    let discourses = read_manifest(manifest)?;
    fs::create_dir_all(out_dir)?;
    let mut report = PrepareReport::default();
    let mut accepted: BTreeSet<String> = BTreeSet::new();
    for d in &discourses {
        for u in &d.utterances {
            match prepare_one(u, frames_dir, align_dir, lpe_dir) {
                Ok(t) => {
                    write_feature(out_dir, &t)?;
                    accepted.insert(u.id.clone());
                    report.accepted.push(u.id.clone());
                }
                Err(e) => {
                    warn!("rejected {}: {e}", u.id);
                    report.rejected.push((u.id.clone(), e.to_string()));
                }
            }
        }
    }
    let styles: Vec<_> = true_styles(&discourses)
        .into_iter()
        .filter(|r| accepted.contains(&r.utterance_id))
        .collect();
    save_styles(out_dir, &styles)?;
    fs::write(out_dir.join(PREPARE_REPORT), report.render())?;
    Ok(report)
}

/// Manifest and feature directory of a corpus directory: `train.jsonl`
/// (or `manifest.jsonl` when there is no split) and `features/`.
pub fn corpus_paths(dir: &Path) -> (PathBuf, PathBuf) {
    let train = dir.join(TRAIN_FILE);
    let manifest = if train.exists() {
        train
    } else {
        dir.join(MANIFEST_FILE)
    };
    (manifest, dir.join(FEATURES_DIR))
}

pub struct TrainRequest<'a> {
    pub stage: u8,
    pub config: Config,
    pub manifest: &'a Path,
    pub features: &'a Path,
    pub out: &'a Path,
    pub init_from: Option<&'a Path>,
    /// Ablations added on top of the configuration's.
    pub ablation: Ablation,
}

/// Path of the loss history written next to a checkpoint.
pub fn history_path(ckpt: &Path) -> PathBuf {
    let mut name = ckpt.as_os_str().to_owned();
    name.push(".history.csv");
    PathBuf::from(name)
}

pub fn cmd_train(req: TrainRequest<'_>) -> Result<(Checkpoint, History)> {
    let mut config = req.config;
    config.ablation.no_word |= req.ablation.no_word;
    config.ablation.no_phn |= req.ablation.no_phn;
    config.ablation.no_pe |= req.ablation.no_pe;
    let corpus = Corpus::load(req.manifest, req.features)?;
    let (ckpt, history) = match req.stage {
        1 => {
            if req.init_from.is_some() {
                return Err(Error::Config(
                    "stage 1 trains from scratch; drop --init-from".into(),
                ));
            }
            let out = train_stage1(&corpus, &config)?;
            (Checkpoint::Stage1(out.model), out.history)
        }
        2 => {
            let init = req.init_from.ok_or_else(|| {
                Error::Config("stage 2 needs a stage-1 checkpoint (--init-from)".into())
            })?;
            let stage1 = match Checkpoint::load(init)? {
                Checkpoint::Stage1(m) => m,
                Checkpoint::Stage2(_) => {
                    return Err(Error::Checkpoint(format!(
                        "{} is a stage-2 checkpoint; stage 2 starts from stage 1",
                        init.display()
                    )))
                }
            };
            let out = train_stage2(&corpus, stage1, &config)?;
            (Checkpoint::Stage2(out.model), out.history)
        }
        other => {
            return Err(Error::Config(format!(
                "unknown stage {other}; expected 1 or 2"
            )))
        }
    };
    if let Some(dir) = req.out.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    ckpt.save(req.out)?;
    history.save(&history_path(req.out))?;
    Ok((ckpt, history))
}

/// Writes clamped predictions to `out_dir`, unclamped ones to
/// `out_dir/raw`, and predicted styles to `out_dir/styles.csv`.
pub fn cmd_infer(
    ckpt_path: &Path,
    manifest: &Path,
    speaker: Option<usize>,
    out_dir: &Path,
) -> Result<eval::Predictions> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    let discourses = read_manifest(manifest)?;
    let preds = eval::predict(&ckpt, &discourses, speaker)?;
    let raw_dir = out_dir.join(RAW_DIR);
    fs::create_dir_all(&raw_dir)?;
    for t in &preds.clamped {
        write_feature(out_dir, t)?;
    }
    for t in &preds.raw {
        write_feature(&raw_dir, t)?;
    }
    save_styles(out_dir, &preds.styles)?;
    Ok(preds)
}

/// Every `<id>.feat` in `dir`, by id.
pub fn read_feature_dir(dir: &Path) -> Result<Vec<PhonemeTargets>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::Validation(format!("cannot read {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "feat"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let t = read_feature_file(open(p)?)?;
            let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
            if t.utterance_id != stem {
                return Err(Error::Validation(format!(
                    "{} holds utterance `{}`",
                    p.display(),
                    t.utterance_id
                )));
            }
            Ok(t)
        })
        .collect()
}

fn read_styles_file(dir: &Path) -> Result<Vec<eval::StyleRow>> {
    read_styles(open(&dir.join(STYLES_FILE))?)
}

/// Scores a prediction directory against a target directory. Unclamped
/// predictions under `raw/` are preferred when present. With a manifest,
/// only its utterances are scored (targets may cover more).
pub fn cmd_eval(
    predictions: &Path,
    targets: &Path,
    manifest: Option<&Path>,
    out_dir: &Path,
) -> Result<EvalReport> {
    let raw = predictions.join(RAW_DIR);
    let pred_dir = if raw.is_dir() {
        raw
    } else {
        predictions.to_path_buf()
    };
    let preds = read_feature_dir(&pred_dir)?;
    let pred_styles = read_styles_file(predictions)?;
    let mut truth = read_feature_dir(targets)?;
    let mut truth_styles = read_styles_file(targets)?;
    if let Some(m) = manifest {
        let keep: BTreeSet<String> = read_manifest(m)?
            .iter()
            .flat_map(|d| d.utterances.iter().map(|u| u.id.clone()))
            .collect();
        let have: BTreeSet<&str> = truth.iter().map(|t| t.utterance_id.as_str()).collect();
        if let Some(missing) = keep.iter().find(|id| !have.contains(id.as_str())) {
            return Err(Error::Validation(format!(
                "no target features for {missing}"
            )));
        }
        truth.retain(|t| keep.contains(&t.utterance_id));
        truth_styles.retain(|s| keep.contains(&s.utterance_id));
    }
    let report = score(&preds, &truth, &pred_styles, &truth_styles)?;
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join(EVAL_JSON), report.to_json()?)?;
    let mut csv = Vec::new();
    report.write_csv(&mut csv)?;
    fs::write(out_dir.join(EVAL_CSV), csv)?;
    Ok(report)
}

pub const PLOT_HEADER: &str = "phoneme_index,symbol,pitch,energy,is_separator";

/// Per-phoneme contour table of one feature file. Symbols come from the
/// manifest; `is_separator` marks separators that carry a pause, taken from
/// the alignment when one is given and otherwise every separator.
pub fn plot_pitch_csv(
    features: &PhonemeTargets,
    utt: &Utterance,
    align_dir: Option<&Path>,
) -> Result<String> {
    features.check_len(utt.phoneme_count())?;
    let utt = match align_dir {
        Some(dir) => {
            let a = read_alignment(open(&dir.join(format!("{}.align", utt.id)))?)?;
            mark_silence(utt, &a)?
        }
        None => {
            let mut u = utt.clone();
            for p in u.words.iter_mut().flat_map(|w| w.phonemes.iter_mut()) {
                p.is_silent = p.is_separator;
            }
            u
        }
    };
    let mut s = format!("{PLOT_HEADER}\n");
    for (i, p) in utt.phonemes().enumerate() {
        s.push_str(&format!(
            "{i},{},{},{},{}\n",
            p.symbol,
            crate::features::format_sig9(features.pitch[i]),
            crate::features::format_sig9(features.energy[i]),
            p.is_separator && p.is_silent
        ));
    }
    Ok(s)
}

pub fn cmd_plot_pitch(
    feature_file: &Path,
    manifest: &Path,
    align_dir: Option<&Path>,
    out_csv: &Path,
) -> Result<usize> {
    let t = read_feature_file(open(feature_file)?)?;
    let discourses = read_manifest(manifest)?;
    let utt = discourses
        .iter()
        .flat_map(|d| &d.utterances)
        .find(|u| u.id == t.utterance_id)
        .ok_or_else(|| {
            Error::Validation(format!(
                "utterance {} is not in the manifest",
                t.utterance_id
            ))
        })?;
    fs::write(out_csv, plot_pitch_csv(&t, utt, align_dir)?)?;
    Ok(t.len())
}
