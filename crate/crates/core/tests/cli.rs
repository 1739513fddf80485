//! The `proso` binary end to end on small synthetic corpora: exit codes,
//! fault injection, determinism, evaluation cross-checks and contour export.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use proso::corpus::Discourse;
use proso::eval::EvalReport;
use proso::features::{read_feature_file, write_feature_file, PhonemeTargets};
use proso::pipeline::read_manifest;
use proso::synthgen::{mean_baseline_mse, mean_lpe};
use tempfile::TempDir;

const TINY_CONFIG: &str = r#"
[model]
d = 8
r = 8
classifier_hidden = 8
attention_dim = 8

[train]
seed = 0

[train.stage1]
epochs = 2
batch_size = 8

[train.stage2]
epochs = 3
batch_size = 4
lr = 0.01
cache_stage1 = true
"#;

fn proso(args: &[&str], seed: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_proso"));
    cmd.args(args)
        .env("RUST_LOG", "warn")
        .env_remove("PROSO_SEED");
    if let Some(s) = seed {
        cmd.env("PROSO_SEED", s);
    }
    cmd.output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = proso(args, None);
    assert_eq!(
        out.status.code(),
        Some(0),
        "proso {} failed: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

struct Workspace {
    tmp: TempDir,
}

impl Workspace {
    /// A generated corpus under `corpus/` plus the tiny training config.
    fn new(law: &str) -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let ws = Self { tmp };
        fs::write(ws.path("tiny.toml"), TINY_CONFIG).unwrap();
        ok(&[
            "generate",
            "--out",
            &ws.s("corpus"),
            "--law",
            law,
            "--discourses",
            "10",
            "--utterances",
            "3",
        ]);
        ws
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.tmp.path().join(rel)
    }

    fn s(&self, rel: &str) -> String {
        self.path(rel).display().to_string()
    }

    fn prepare(&self, align: &str, out: &str) -> Output {
        proso(
            &[
                "prepare",
                &self.s("corpus/manifest.jsonl"),
                &self.s("corpus/frames"),
                &self.s(align),
                &self.s("corpus/lpe"),
                &self.s(out),
            ],
            None,
        )
    }

    fn train(&self, stage: &str, out: &str, extra: &[&str]) {
        let mut args = vec![
            "train", "--stage", stage, "--config", "", "--corpus", "", "--out", "",
        ];
        let (config, corpus, out) = (self.s("tiny.toml"), self.s("corpus"), self.s(out));
        args[4] = &config;
        args[6] = &corpus;
        args[8] = &out;
        args.extend_from_slice(extra);
        ok(&args);
    }

    fn test_discourses(&self) -> Vec<Discourse> {
        read_manifest(&self.path("corpus/test.jsonl")).unwrap()
    }
}

fn read_dir_sorted(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    v.sort();
    v
}

fn feat(dir: &Path, id: &str) -> PhonemeTargets {
    read_feature_file(&fs::read(dir.join(format!("{id}.feat"))).unwrap()[..]).unwrap()
}

#[test]
fn usage_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("x.ckpt").display().to_string();
    let corpus = tmp.path().display().to_string();
    let missing_init = proso(
        &["train", "--stage", "2", "--corpus", &corpus, "--out", &out],
        None,
    );
    assert_eq!(missing_init.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing_init.stderr).contains("--init-from"));
    assert_eq!(
        proso(
            &["train", "--stage", "3", "--corpus", &corpus, "--out", &out],
            None
        )
        .status
        .code(),
        Some(2)
    );
    assert_eq!(proso(&["frobnicate"], None).status.code(), Some(2));
    assert_eq!(proso(&[], None).status.code(), Some(2));
}

#[test]
fn prepare_is_clean_and_idempotent() {
    let ws = Workspace::new("word_dependent");
    for out in ["a", "b"] {
        let o = ws.prepare("corpus/align", out);
        assert_eq!(o.status.code(), Some(0));
        assert!(String::from_utf8_lossy(&o.stdout).contains("rejected 0"));
    }
    let (a, b) = (
        read_dir_sorted(&ws.path("a")),
        read_dir_sorted(&ws.path("b")),
    );
    assert_eq!(a, b);
    // prepared features reproduce the generator's own
    let generated: Vec<_> = read_dir_sorted(&ws.path("corpus/features"));
    let feats = |v: &[(String, Vec<u8>)]| {
        v.iter()
            .filter(|(n, _)| n.ends_with(".feat"))
            .cloned()
            .collect::<Vec<_>>()
    };
    assert_eq!(feats(&a), feats(&generated));
    assert_eq!(feats(&a).len(), 30);
}

#[test]
fn corrupted_alignment_rejects_only_that_utterance() {
    let ws = Workspace::new("word_dependent");
    let align = ws.path("align_bad");
    fs::create_dir(&align).unwrap();
    for (name, bytes) in read_dir_sorted(&ws.path("corpus/align")) {
        fs::write(align.join(name), bytes).unwrap();
    }
    let victim = "d0003_001";
    let path = align.join(format!("{victim}.align"));
    let text = fs::read_to_string(&path).unwrap();
    // relabel the first phoneme interval
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    let i = lines
        .iter()
        .position(|l| !l.starts_with("PROSO") && !l.starts_with("silence"))
        .unwrap();
    let rest = lines[i].split_once(' ').unwrap().1.to_string();
    lines[i] = format!("zz {rest}");
    fs::write(&path, lines.join("\n") + "\n").unwrap();

    let o = ws.prepare("align_bad", "out");
    assert_eq!(o.status.code(), Some(1));
    let report = fs::read_to_string(ws.path("out/prepare_report.txt")).unwrap();
    assert!(report.contains("rejected 1\n"), "{report}");
    let rejected: Vec<&str> = report
        .lines()
        .skip(2)
        .map(|l| l.split('\t').next().unwrap())
        .collect();
    assert_eq!(rejected, [victim]);
    assert!(!ws.path(&format!("out/{victim}.feat")).exists());
    let written = read_dir_sorted(&ws.path("out"))
        .iter()
        .filter(|(n, _)| n.ends_with(".feat"))
        .count();
    assert_eq!(written, 29);
}

#[test]
fn inference_shapes_determinism_and_speakers() {
    let ws = Workspace::new("word_dependent");
    ws.train("1", "s1.ckpt", &[]);
    let test = ws.s("corpus/test.jsonl");
    ok(&["infer", &ws.s("s1.ckpt"), &test, &ws.s("p1")]);
    ok(&["infer", &ws.s("s1.ckpt"), &test, &ws.s("p2")]);
    assert_eq!(
        read_dir_sorted(&ws.path("p1")),
        read_dir_sorted(&ws.path("p2"))
    );
    assert_eq!(
        read_dir_sorted(&ws.path("p1/raw")),
        read_dir_sorted(&ws.path("p2/raw"))
    );
    for u in ws.test_discourses().iter().flat_map(|d| &d.utterances) {
        assert_eq!(feat(&ws.path("p1"), &u.id).len(), u.phoneme_count());
        assert_eq!(feat(&ws.path("p1/raw"), &u.id).len(), u.phoneme_count());
    }
    ok(&[
        "infer",
        &ws.s("s1.ckpt"),
        &test,
        &ws.s("p3"),
        "--speaker",
        "1",
    ]);
    let bad = proso(
        &[
            "infer",
            &ws.s("s1.ckpt"),
            &test,
            &ws.s("p4"),
            "--speaker",
            "99",
        ],
        None,
    );
    assert_eq!(bad.status.code(), Some(1));
    let err = String::from_utf8_lossy(&bad.stderr);
    assert!(err.contains("99") && err.contains("known"), "{err}");
}

#[test]
fn stage2_adjusts_lpe_but_keeps_stage1_acoustics() {
    let ws = Workspace::new("context_offset");
    ws.train("1", "s1.ckpt", &[]);
    ws.train("2", "s2.ckpt", &["--init-from", &ws.s("s1.ckpt")]);
    assert!(ws.path("s2.ckpt.history.csv").exists());
    let test = ws.s("corpus/test.jsonl");
    ok(&["infer", &ws.s("s1.ckpt"), &test, &ws.s("p1")]);
    ok(&["infer", &ws.s("s2.ckpt"), &test, &ws.s("p2")]);
    let mut lpe_diff = 0.0f64;
    for u in ws.test_discourses().iter().flat_map(|d| &d.utterances) {
        let (a, b) = (
            feat(&ws.path("p1/raw"), &u.id),
            feat(&ws.path("p2/raw"), &u.id),
        );
        assert_eq!(a.pitch, b.pitch);
        assert_eq!(a.energy, b.energy);
        for (x, y) in a.lpe.iter().zip(&b.lpe) {
            for k in 0..3 {
                lpe_diff = lpe_diff.max((x[k] - y[k]).abs());
            }
        }
    }
    assert!(lpe_diff > 1e-6, "stage 2 left LPE untouched ({lpe_diff:e})");
}

#[test]
fn eval_identity_and_mean_predictor() {
    let ws = Workspace::new("word_dependent");
    let feats = ws.s("corpus/features");
    ok(&["eval", &feats, &feats, "--out", &ws.s("self")]);
    let json = fs::read_to_string(ws.path("self/eval_report.json")).unwrap();
    let r: EvalReport = serde_json::from_str(&json).unwrap();
    assert_eq!((r.lpe_mse, r.pitch_mse, r.energy_mse), (0.0, 0.0, 0.0));
    assert_eq!(
        (r.utterance_style_accuracy, r.discourse_style_accuracy),
        (1.0, 1.0)
    );
    assert!(ws.path("self/eval_report.csv").exists());

    // every prediction is the corpus mean LPE
    let targets = proso::pipeline::read_feature_dir(&ws.path("corpus/features")).unwrap();
    let mean = mean_lpe(&targets).unwrap();
    let pred = ws.path("mean");
    fs::create_dir(&pred).unwrap();
    for t in &targets {
        let p = PhonemeTargets {
            lpe: vec![mean; t.len()],
            ..t.clone()
        };
        let mut buf = Vec::new();
        write_feature_file(&p, &mut buf).unwrap();
        fs::write(pred.join(format!("{}.feat", t.utterance_id)), buf).unwrap();
    }
    fs::copy(
        ws.path("corpus/features/styles.csv"),
        pred.join("styles.csv"),
    )
    .unwrap();
    ok(&["eval", &ws.s("mean"), &feats]);
    let r: EvalReport =
        serde_json::from_str(&fs::read_to_string(pred.join("eval_report.json")).unwrap()).unwrap();
    let baseline = mean_baseline_mse(&targets).unwrap();
    assert!(
        (r.lpe_mse - baseline).abs() < 1e-12,
        "{} vs {baseline}",
        r.lpe_mse
    );

    // a missing prediction is named
    fs::remove_file(pred.join("d0000_000.feat")).unwrap();
    let o = proso(&["eval", &ws.s("mean"), &feats], None);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("d0000_000"));
}

fn plot(ws: &Workspace, feature: &Path, out: &str, align: bool) -> Vec<Vec<String>> {
    let feature = feature.display().to_string();
    let manifest = ws.s("corpus/manifest.jsonl");
    let out_path = ws.s(out);
    let align_dir = ws.s("corpus/align");
    let mut args = vec![
        "plot-pitch",
        feature.as_str(),
        out_path.as_str(),
        "--manifest",
        manifest.as_str(),
    ];
    if align {
        args.extend(["--align", align_dir.as_str()]);
    }
    ok(&args);
    let text = fs::read_to_string(ws.path(out)).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next(),
        Some("phoneme_index,symbol,pitch,energy,is_separator")
    );
    lines
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn plot_rows_and_separator_flags() {
    let ws = Workspace::new("word_dependent");
    let discourses = read_manifest(&ws.path("corpus/manifest.jsonl")).unwrap();
    let generated = proso::synthgen::generate_in_memory(&proso::synthgen::GeneratorSpec {
        num_discourses: 10,
        utterances_per_discourse: 3,
        ..Default::default()
    })
    .unwrap();
    let mut checked_pause = false;
    for (u, marked) in discourses
        .iter()
        .flat_map(|d| &d.utterances)
        .zip(generated.discourses.iter().flat_map(|d| &d.utterances))
        .take(8)
    {
        let file = ws.path(&format!("corpus/features/{}.feat", u.id));
        let rows = plot(&ws, &file, "plot.csv", true);
        assert_eq!(rows.len(), u.phoneme_count());
        for (row, p) in rows.iter().zip(marked.phonemes()) {
            assert_eq!(row[1], p.symbol);
            assert_eq!(row[4], (p.is_separator && p.is_silent).to_string());
            checked_pause |= p.is_separator && p.is_silent;
        }
        let loose = plot(&ws, &file, "plot.csv", false);
        for (row, p) in loose.iter().zip(u.phonemes()) {
            assert_eq!(row[4], p.is_separator.to_string());
        }
    }
    assert!(checked_pause, "fixture has no pausing separator");
}

#[test]
fn full_and_no_word_contours_differ_at_pauses() {
    let ws = Workspace::new("word_dependent");
    ws.train("1", "full.ckpt", &[]);
    ws.train("1", "noword.ckpt", &["--ablation", "no_word"]);
    let test = ws.s("corpus/test.jsonl");
    ok(&["infer", &ws.s("full.ckpt"), &test, &ws.s("full")]);
    ok(&["infer", &ws.s("noword.ckpt"), &test, &ws.s("noword")]);
    let mut differing = 0;
    for u in ws.test_discourses().iter().flat_map(|d| &d.utterances) {
        let a = plot(&ws, &ws.path(&format!("full/{}.feat", u.id)), "a.csv", true);
        let b = plot(
            &ws,
            &ws.path(&format!("noword/{}.feat", u.id)),
            "b.csv",
            true,
        );
        for (ra, rb) in a.iter().zip(&b) {
            if ra[4] == "true" && ra[2] != rb[2] {
                differing += 1;
            }
        }
    }
    assert!(differing > 0);
}

#[test]
fn seed_override_and_training_determinism() {
    let ws = Workspace::new("word_dependent");
    let args = |out: &str| {
        vec![
            "train".to_string(),
            "--stage".into(),
            "1".into(),
            "--config".into(),
            ws.s("tiny.toml"),
            "--corpus".into(),
            ws.s("corpus"),
            "--out".into(),
            ws.s(out),
        ]
    };
    for (out, seed) in [("a.ckpt", None), ("b.ckpt", None), ("c.ckpt", Some("7"))] {
        let a = args(out);
        let refs: Vec<&str> = a.iter().map(String::as_str).collect();
        assert_eq!(proso(&refs, seed).status.code(), Some(0));
    }
    let read = |p: &str| fs::read(ws.path(p)).unwrap();
    assert_eq!(read("a.ckpt"), read("b.ckpt"));
    assert_eq!(read("a.ckpt.history.csv"), read("b.ckpt.history.csv"));
    assert_ne!(read("a.ckpt"), read("c.ckpt"));
    let bad = args("d.ckpt");
    let refs: Vec<&str> = bad.iter().map(String::as_str).collect();
    assert_eq!(proso(&refs, Some("seven")).status.code(), Some(1));
}

#[test]
fn split_keeps_discourses_whole() {
    let ws = Workspace::new("word_dependent");
    ok(&[
        "split",
        &ws.s("corpus/manifest.jsonl"),
        "--out",
        &ws.s("split"),
        "--test-fraction",
        "0.3",
        "--seed",
        "4",
    ]);
    let train = read_manifest(&ws.path("split/train.jsonl")).unwrap();
    let test = read_manifest(&ws.path("split/test.jsonl")).unwrap();
    assert_eq!(train.len() + test.len(), 10);
    assert!(!train.is_empty() && !test.is_empty());
    assert!(train.iter().all(|d| !test.iter().any(|t| t.id == d.id)));
    assert!(train.iter().chain(&test).all(|d| d.utterances.len() == 3));
}
