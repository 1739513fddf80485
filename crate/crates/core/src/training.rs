//! Two-stage optimisation: the utterance model first, then the discourse
//! model on top of the frozen utterance model.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use log::{debug, info};
use ndarray::{s, Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;

use crate::checkpoint::{config_hash, umpm_config_hash, STAGE1_PREFIX, STAGE2_PREFIX};
use crate::config::Config;
use crate::corpus::{parse_manifest, Discourse, ManifestOptions};
use crate::encoder::{EncoderSource, Vocabulary};
use crate::error::{Error, Result};
use crate::features::{read_feature_file, PhonemeTargets, LPE_DIM};
use crate::model_d::{
    self, discourse_loss, stack_targets, DiscourseBatch, DiscourseLambdas, Dmpm, DmpmParams,
};
use crate::model_u::{masked_mse2, Inventory, Lambdas, Normalization, Umpm, UttExample};
use crate::nn::init::ParamRng;
use crate::nn::{digest, first_non_finite, global_norm, scale, zeroed, Adam, Params};

/// Discourses with their per-utterance feature targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub discourses: Vec<Discourse>,
    pub targets: HashMap<String, PhonemeTargets>,
}

impl Corpus {
    pub fn new(
        discourses: Vec<Discourse>,
        targets: impl IntoIterator<Item = PhonemeTargets>,
    ) -> Result<Self> {
        let targets: HashMap<_, _> = targets
            .into_iter()
            .map(|t| (t.utterance_id.clone(), t))
            .collect();
        let c = Self {
            discourses,
            targets,
        };
        for d in &c.discourses {
            for u in &d.utterances {
                c.target(&u.id)?.check_len(u.phoneme_count())?;
            }
        }
        Ok(c)
    }

    /// Reads a manifest and `<features_dir>/<id>.feat` for every utterance.
    pub fn load(manifest: &Path, features_dir: &Path) -> Result<Self> {
        let file = std::fs::File::open(manifest)?;
        let discourses = parse_manifest(std::io::BufReader::new(file), ManifestOptions::default())?;
        let mut targets = Vec::new();
        for d in &discourses {
            for u in &d.utterances {
                let path = features_dir.join(format!("{}.feat", u.id));
                let file = std::fs::File::open(&path).map_err(|e| {
                    Error::Validation(format!("missing feature file {}: {e}", path.display()))
                })?;
                targets.push(read_feature_file(std::io::BufReader::new(file))?);
            }
        }
        Self::new(discourses, targets)
    }

    /// The subset of this corpus covering `discourses`.
    pub fn subset(&self, discourses: &[Discourse]) -> Result<Self> {
        let mut targets = Vec::new();
        for d in discourses {
            for u in &d.utterances {
                targets.push(self.target(&u.id)?.clone());
            }
        }
        Self::new(discourses.to_vec(), targets)
    }

    pub fn target(&self, id: &str) -> Result<&PhonemeTargets> {
        self.targets
            .get(id)
            .ok_or_else(|| Error::Validation(format!("no targets for utterance {id}")))
    }

    pub fn num_utterances(&self) -> usize {
        self.discourses.iter().map(|d| d.utterances.len()).sum()
    }
}

/// One row of the loss history.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub pitch_mse: f64,
    pub energy_mse: f64,
    pub lpe_mse: f64,
    pub style_ce: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochLoss>,
}

impl History {
    pub const HEADER: &'static str = "epoch,pitch_mse,energy_mse,lpe_mse,style_ce,total";

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{}", Self::HEADER)?;
        for e in &self.epochs {
            writeln!(
                w,
                "{},{:e},{:e},{:e},{:e},{:e}",
                e.epoch, e.pitch_mse, e.energy_mse, e.lpe_mse, e.style_ce, e.total
            )?;
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("ascii")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Running means of the five history columns over one epoch.
#[derive(Default)]
struct EpochAccumulator {
    sums: [f64; 5],
    batches: usize,
}

impl EpochAccumulator {
    fn add(&mut self, values: [f64; 5]) {
        for (s, v) in self.sums.iter_mut().zip(values) {
            *s += v;
        }
        self.batches += 1;
    }

    fn finish(&self, epoch: usize) -> EpochLoss {
        let n = self.batches.max(1) as f64;
        let [p, e, l, c, t] = self.sums.map(|s| s / n);
        EpochLoss {
            epoch,
            pitch_mse: p,
            energy_mse: e,
            lpe_mse: l,
            style_ce: c,
            total: t,
        }
    }
}

/// The run's single random stream: parameter initialisation first, then
/// every shuffle, all drawn from one generator seeded by `seed`.
pub fn set_determinism(seed: u64) -> ParamRng {
    ParamRng::seed_from_u64(seed)
}

fn check_finite(
    total: f64,
    params: &dyn Params,
    grads: &dyn Params,
    prefix: &str,
    epoch: usize,
    step: u64,
) -> Result<()> {
    let bad_params = first_non_finite(params, prefix);
    let bad_grads = first_non_finite(grads, prefix);
    if total.is_finite() && bad_params.is_none() && bad_grads.is_none() {
        return Ok(());
    }
    let culprit = bad_params
        .map(|n| format!("parameter {n}"))
        .or(bad_grads.map(|n| format!("gradient {n}")))
        .unwrap_or_else(|| "the loss itself".to_string());
    Err(Error::NonFinite(format!(
        "loss {total} at epoch {epoch}, step {step}; first non-finite tensor: {culprit}"
    )))
}

fn clip<P: Params>(grads: &mut P, max_norm: Option<f64>) {
    if let Some(max) = max_norm {
        let norm = global_norm(grads);
        if norm > max {
            scale(grads, max / norm);
        }
    }
}

pub struct Stage1Outcome {
    pub model: Umpm,
    pub history: History,
    pub steps: u64,
}

/// Builds the stage-1 model for `corpus` (inventory and vocabulary come from
/// the corpus) and its training examples.
pub fn init_stage1(
    corpus: &Corpus,
    config: &Config,
    rng: &mut ParamRng,
) -> Result<(Umpm, Vec<UttExample>)> {
    config.validate()?;
    if corpus.num_utterances() == 0 {
        return Err(Error::Validation("training corpus is empty".into()));
    }
    let inventory = Inventory::from_corpus(&corpus.discourses);
    let vocabulary = Vocabulary::from_corpus(&corpus.discourses);
    let mut model = Umpm::new(&config.model, config.ablation, inventory, vocabulary, rng)?;
    if config.model.normalize_acoustics {
        model.norm = Normalization::from_targets(corpus.targets.values());
    }
    let mut examples = Vec::with_capacity(corpus.num_utterances());
    for d in &corpus.discourses {
        for u in &d.utterances {
            examples.push(model.example(u, corpus.target(&u.id)?)?);
        }
    }
    Ok((model, examples))
}

/// Learning rate of a stage-1 tensor.
pub fn stage1_rate(model: &Umpm, config: &Config) -> impl Fn(&str) -> f64 {
    let enc = model
        .params
        .encoder
        .lr_override
        .unwrap_or(config.train.stage1.lr_encoder);
    let rest = config.train.stage1.lr_rest;
    move |name: &str| {
        if name.starts_with("encoder.") {
            enc
        } else {
            rest
        }
    }
}

pub fn train_stage1(corpus: &Corpus, config: &Config) -> Result<Stage1Outcome> {
    let mut rng = set_determinism(config.train.seed);
    let (mut model, examples) = init_stage1(corpus, config, &mut rng)?;
    let s1 = &config.train.stage1;
    let lambdas = Lambdas::from(s1);
    let rate = stage1_rate(&model, config);
    let mut adam = Adam::new(config.train.adam);
    let mut history = History::default();
    let mut order: Vec<usize> = (0..examples.len()).collect();
    info!(
        "stage 1: {} utterances, {} epochs, batch {}",
        examples.len(),
        s1.epochs,
        s1.batch_size
    );
    for epoch in 0..s1.epochs {
        order.shuffle(&mut rng);
        let mut acc = EpochAccumulator::default();
        for chunk in order.chunks(s1.batch_size) {
            let batch: Vec<&UttExample> = chunk.iter().map(|&i| &examples[i]).collect();
            let out = model.batch_loss(&batch, &lambdas, true)?;
            let mut grads = out.grads.expect("requested");
            check_finite(out.total, &model.params, &grads, "", epoch, adam.steps())?;
            clip(&mut grads, config.train.grad_clip);
            adam.step("", &mut model.params, &grads, &rate)?;
            let c = out.components;
            acc.add([c.pitch_mse, c.energy_mse, c.lpe_mse, c.style_ce, out.total]);
        }
        let row = acc.finish(epoch);
        debug!(
            "stage 1 epoch {epoch}: total {:.6} lpe {:.6}",
            row.total, row.lpe_mse
        );
        history.epochs.push(row);
    }
    Ok(Stage1Outcome {
        model,
        history,
        steps: adam.steps(),
    })
}

pub struct Stage2Outcome {
    pub model: Dmpm,
    pub history: History,
    pub steps: u64,
    /// Digest of the stage-1 tensors before and after training.
    pub stage1_digest: (String, String),
}

/// Fails unless `corpus` has the inventory (and, for the toy encoder, the
/// vocabulary) the stage-1 model was trained with.
pub fn check_corpus_matches(stage1: &Umpm, corpus: &Corpus) -> Result<()> {
    let inventory = Inventory::from_corpus(&corpus.discourses);
    let vocabulary = match stage1.params.encoder.source {
        EncoderSource::Toy => Vocabulary::from_corpus(&corpus.discourses),
        EncoderSource::Precomputed => stage1.params.encoder.vocabulary.clone(),
    };
    let expected = umpm_config_hash(stage1);
    let actual = config_hash(&stage1.config, &stage1.ablation, &inventory, &vocabulary);
    if expected != actual {
        return Err(Error::Config(format!(
            "corpus does not match the stage-1 checkpoint (config hash {} vs {})",
            &actual[..12],
            &expected[..12]
        )));
    }
    Ok(())
}

/// Stage-2 targets and stage-1 outputs of one discourse.
struct DiscourseItem {
    batch: DiscourseBatch,
    targets: Array3<f64>,
    pitch: Array2<f64>,
    energy: Array2<f64>,
}

fn discourse_item(model: &Dmpm, d: &Discourse, corpus: &Corpus) -> Result<DiscourseItem> {
    let batch = model.batch(d)?;
    let n_max = batch.mask.ncols();
    let ts: Vec<&PhonemeTargets> = d
        .utterances
        .iter()
        .map(|u| corpus.target(&u.id))
        .collect::<Result<_>>()?;
    let norm = &model.stage1.norm;
    let mut pitch = Array2::zeros((ts.len(), n_max));
    let mut energy = Array2::zeros((ts.len(), n_max));
    for (u, t) in ts.iter().enumerate() {
        for p in 0..t.len() {
            pitch[[u, p]] = norm.pitch_in(t.pitch[p]);
            energy[[u, p]] = norm.energy_in(t.energy[p]);
        }
    }
    Ok(DiscourseItem {
        targets: stack_targets(&ts, n_max)?,
        batch,
        pitch,
        energy,
    })
}

/// Stacks the utterance rows of several discourses into one padded block.
fn stack3(parts: &[&Array3<f64>], n_max: usize) -> Array3<f64> {
    let rows: usize = parts.iter().map(|a| a.dim().0).sum();
    let mut out = Array3::zeros((rows, n_max, LPE_DIM));
    let mut r = 0;
    for a in parts {
        let (m, n, _) = a.dim();
        out.slice_mut(s![r..r + m, ..n, ..]).assign(a);
        r += m;
    }
    out
}

fn stack2<T: Clone + Default>(parts: &[&Array2<T>], n_max: usize) -> Array2<T> {
    let rows: usize = parts.iter().map(|a| a.nrows()).sum();
    let mut out = Array2::from_elem((rows, n_max), T::default());
    let mut r = 0;
    for a in parts {
        let (m, n) = a.dim();
        out.slice_mut(s![r..r + m, ..n]).assign(a);
        r += m;
    }
    out
}

/// Loss, components and gradients of the discourse model over a batch of
/// discourses. Returns `(total, [pitch, energy, lpe, style, total], grads)`.
fn stage2_batch(
    model: &Dmpm,
    items: &[&DiscourseItem],
    lambdas: &DiscourseLambdas,
) -> Result<(f64, [f64; 5], DmpmParams)> {
    let mut outs = Vec::with_capacity(items.len());
    for it in items {
        outs.push(model_d::forward(&it.batch, &model.params)?);
    }
    let n_max = items
        .iter()
        .map(|it| it.batch.mask.ncols())
        .max()
        .unwrap_or(0);
    let lpe_final = stack3(
        &outs.iter().map(|(o, _)| &o.lpe_final).collect::<Vec<_>>(),
        n_max,
    );
    let targets = stack3(
        &items.iter().map(|it| &it.targets).collect::<Vec<_>>(),
        n_max,
    );
    let mask = stack2(
        &items.iter().map(|it| &it.batch.mask).collect::<Vec<_>>(),
        n_max,
    );
    let classes = outs[0].0.style_logits.len();
    let mut logits = Array2::zeros((items.len(), classes));
    for (b, (o, _)) in outs.iter().enumerate() {
        for c in 0..classes {
            logits[[b, c]] = o.style_logits[c];
        }
    }
    let labels: Vec<usize> = items.iter().map(|it| it.batch.style_label).collect();
    let (total, comps, d_lpe, d_logits) =
        discourse_loss(&lpe_final, &targets, &mask, &logits, &labels, lambdas)?;

    // frozen stage-1 acoustics, reported for reference
    let mut s1_pitch = Vec::new();
    let mut s1_energy = Vec::new();
    for it in items {
        let (m, n) = it.batch.mask.dim();
        let mut p = Array2::zeros((m, n));
        let mut e = Array2::zeros((m, n));
        for (u, o) in it.batch.stage1.iter().enumerate() {
            for q in 0..o.len() {
                p[[u, q]] = o.pitch_hat[q];
                e[[u, q]] = o.energy_hat[q];
            }
        }
        s1_pitch.push(p);
        s1_energy.push(e);
    }
    let (pitch_mse, _) = masked_mse2(
        &stack2(&s1_pitch.iter().collect::<Vec<_>>(), n_max),
        &stack2(&items.iter().map(|it| &it.pitch).collect::<Vec<_>>(), n_max),
        &mask,
        0.0,
    );
    let (energy_mse, _) = masked_mse2(
        &stack2(&s1_energy.iter().collect::<Vec<_>>(), n_max),
        &stack2(
            &items.iter().map(|it| &it.energy).collect::<Vec<_>>(),
            n_max,
        ),
        &mask,
        0.0,
    );

    let mut grads = zeroed(&model.params);
    let mut row = 0;
    for (b, (it, (out, tr))) in items.iter().zip(&outs).enumerate() {
        let (m, n) = it.batch.mask.dim();
        let d = d_lpe.slice(s![row..row + m, ..n, ..]).to_owned();
        model_d::backward(
            &it.batch,
            out,
            tr,
            &d,
            &d_logits.row(b).to_owned(),
            &model.params,
            &mut grads,
        );
        row += m;
    }
    Ok((
        total,
        [pitch_mse, energy_mse, comps.lpe_mse, comps.style_ce, total],
        grads,
    ))
}

pub fn train_stage2(corpus: &Corpus, stage1: Umpm, config: &Config) -> Result<Stage2Outcome> {
    config.validate()?;
    check_corpus_matches(&stage1, corpus)?;
    let before = digest(&FrozenView(&stage1), STAGE1_PREFIX);
    let mut rng = set_determinism(config.train.seed);
    let mut model = Dmpm::new(stage1, &mut rng)?;
    let s2 = &config.train.stage2;
    let lambdas = DiscourseLambdas::from(s2);
    let mut adam = Adam::new(config.train.adam);
    adam.freeze_prefix(STAGE1_PREFIX);
    let lr = s2.lr;
    let mut history = History::default();
    let discourses = &corpus.discourses;
    let mut cache: Option<Vec<DiscourseItem>> = None;
    if s2.cache_stage1 {
        cache = Some(
            discourses
                .iter()
                .map(|d| discourse_item(&model, d, corpus))
                .collect::<Result<_>>()?,
        );
    }
    let mut order: Vec<usize> = (0..discourses.len()).collect();
    info!(
        "stage 2: {} discourses, {} epochs, batch {}",
        discourses.len(),
        s2.epochs,
        s2.batch_size
    );
    for epoch in 0..s2.epochs {
        order.shuffle(&mut rng);
        let mut acc = EpochAccumulator::default();
        for chunk in order.chunks(s2.batch_size) {
            let fresh: Vec<DiscourseItem>;
            let items: Vec<&DiscourseItem> = match &cache {
                Some(c) => chunk.iter().map(|&i| &c[i]).collect(),
                None => {
                    fresh = chunk
                        .iter()
                        .map(|&i| discourse_item(&model, &discourses[i], corpus))
                        .collect::<Result<_>>()?;
                    fresh.iter().collect()
                }
            };
            let (total, row, mut grads) = stage2_batch(&model, &items, &lambdas)?;
            check_finite(
                total,
                &model.params,
                &grads,
                STAGE2_PREFIX,
                epoch,
                adam.steps(),
            )?;
            clip(&mut grads, config.train.grad_clip);
            adam.step(STAGE2_PREFIX, &mut model.params, &grads, &|_| lr)?;
            acc.add(row);
        }
        let row = acc.finish(epoch);
        debug!(
            "stage 2 epoch {epoch}: total {:.6} lpe {:.6}",
            row.total, row.lpe_mse
        );
        history.epochs.push(row);
    }
    let after = digest(&FrozenView(&model.stage1), STAGE1_PREFIX);
    if before != after {
        return Err(Error::FrozenParameter(format!(
            "{STAGE1_PREFIX} digest changed during training"
        )));
    }
    Ok(Stage2Outcome {
        model,
        history,
        steps: adam.steps(),
        stage1_digest: (before, after),
    })
}

/// Read-only view of every stage-1 tensor (including a non-trainable
/// encoder) for digests.
pub struct FrozenView<'a>(pub &'a Umpm);

impl Params for FrozenView<'_> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.0.params.visit_state(prefix, f);
    }

    fn visit_mut(&mut self, _prefix: &str, _f: &mut dyn FnMut(&str, &mut [f64])) {}
}

/// Digest of every stage-1 tensor.
pub fn stage1_digest(model: &Umpm) -> String {
    digest(&FrozenView(model), STAGE1_PREFIX)
}
