//! `proso`: corpus preparation, two-stage training, inference, evaluation
//! and contour export.
//!
//! Exit status is 0 on success, 1 when an input fails validation and 2 on a
//! usage error.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use log::info;

use proso::config::{Ablation, Config};
use proso::pipeline::{self, TrainRequest};
use proso::synthgen::{GeneratorSpec, TargetLaw};

#[derive(Parser)]
#[command(
    name = "proso",
    version,
    about = "Discourse-aware phoneme prosody prediction"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus with known target laws.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = TargetLaw::WordDependent)]
        law: TargetLaw,
        #[arg(long)]
        discourses: Option<usize>,
        #[arg(long)]
        utterances: Option<usize>,
        #[arg(long)]
        styles: Option<usize>,
        #[arg(long)]
        speakers: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Split a manifest by discourse into train.jsonl and test.jsonl.
    Split {
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.2)]
        test_fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Extract phoneme-level feature files from frames, alignments and LPE targets.
    Prepare {
        manifest: PathBuf,
        frames_dir: PathBuf,
        align_dir: PathBuf,
        lpe_dir: PathBuf,
        out_dir: PathBuf,
    },
    /// Train the utterance model (stage 1) or the discourse model (stage 2).
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Corpus directory holding train.jsonl (or manifest.jsonl) and features/.
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, required_if_eq("stage", "2"))]
        init_from: Option<PathBuf>,
        /// no_word, no_phn or no_pe; repeatable.
        #[arg(long)]
        ablation: Vec<String>,
    },
    /// Predict feature files from text alone.
    Infer {
        ckpt: PathBuf,
        manifest: PathBuf,
        out_dir: PathBuf,
        #[arg(long)]
        speaker: Option<usize>,
    },
    /// Compare predicted and target feature directories.
    Eval {
        predictions_dir: PathBuf,
        targets_dir: PathBuf,
        /// Restrict scoring to this manifest's utterances.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Report directory; defaults to the predictions directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export a per-phoneme pitch and energy table for plotting.
    PlotPitch {
        feature_file: PathBuf,
        out_csv: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Alignment directory used to flag pausing separators.
        #[arg(long)]
        align: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Command::Generate {
            out,
            law,
            discourses,
            utterances,
            styles,
            speakers,
            seed,
        } => {
            let d = GeneratorSpec::default();
            let spec = GeneratorSpec {
                target_law: law,
                num_discourses: discourses.unwrap_or(d.num_discourses),
                utterances_per_discourse: utterances.unwrap_or(d.utterances_per_discourse),
                num_styles: styles.unwrap_or(d.num_styles),
                num_speakers: speakers.unwrap_or(d.num_speakers),
                seed: seed.unwrap_or(d.seed),
                ..d
            };
            pipeline::cmd_generate(&spec, &out)?;
            Ok(true)
        }
        Command::Split {
            manifest,
            out,
            test_fraction,
            seed,
        } => {
            let (train, test) = pipeline::cmd_split(&manifest, test_fraction, seed, &out)?;
            println!("train {train} discourses, test {test} discourses");
            Ok(true)
        }
        Command::Prepare {
            manifest,
            frames_dir,
            align_dir,
            lpe_dir,
            out_dir,
        } => {
            let report =
                pipeline::cmd_prepare(&manifest, &frames_dir, &align_dir, &lpe_dir, &out_dir)?;
            print!("{}", report.render());
            Ok(report.rejected.is_empty())
        }
        Command::Train {
            stage,
            config,
            corpus,
            manifest,
            features,
            out,
            init_from,
            ablation,
        } => {
            let config = match &config {
                Some(p) => Config::load(p).with_context(|| format!("loading {}", p.display()))?,
                None => {
                    let mut c = Config::default();
                    c.apply_env()?;
                    c
                }
            };
            let (default_manifest, default_features) = pipeline::corpus_paths(&corpus);
            let manifest = manifest.unwrap_or(default_manifest);
            let features = features.unwrap_or(default_features);
            let (_, history) = pipeline::cmd_train(TrainRequest {
                stage,
                config,
                manifest: &manifest,
                features: &features,
                out: &out,
                init_from: init_from.as_deref(),
                ablation: Ablation::from_flags(&ablation)?,
            })?;
            if let Some(last) = history.epochs.last() {
                info!("final epoch total loss {:.6}", last.total);
            }
            println!("wrote {}", out.display());
            Ok(true)
        }
        Command::Infer {
            ckpt,
            manifest,
            out_dir,
            speaker,
        } => {
            let preds = pipeline::cmd_infer(&ckpt, &manifest, speaker, &out_dir)?;
            println!(
                "wrote {} predictions to {}",
                preds.clamped.len(),
                out_dir.display()
            );
            Ok(true)
        }
        Command::Eval {
            predictions_dir,
            targets_dir,
            manifest,
            out,
        } => {
            let out = out.unwrap_or_else(|| predictions_dir.clone());
            let r = pipeline::cmd_eval(&predictions_dir, &targets_dir, manifest.as_deref(), &out)?;
            println!(
                "lpe_mse {:.6} pitch_mse {:.6} energy_mse {:.6} utterance_style_accuracy {:.4} discourse_style_accuracy {:.4}",
                r.lpe_mse, r.pitch_mse, r.energy_mse, r.utterance_style_accuracy, r.discourse_style_accuracy
            );
            Ok(true)
        }
        Command::PlotPitch {
            feature_file,
            out_csv,
            manifest,
            align,
        } => {
            let rows =
                pipeline::cmd_plot_pitch(&feature_file, &manifest, align.as_deref(), &out_csv)?;
            println!("wrote {rows} rows to {}", out_csv.display());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
