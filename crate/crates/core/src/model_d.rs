//! Discourse-level model trained on top of a frozen utterance model.
//!
//! The utterance vectors of a discourse pass through a bidirectional LSTM
//! (`W`), a trainable `r × 3 × 3` tensor maps each contextualised vector
//! onto a correction of that utterance's stage-1 LPE, and attention pooling
//! over `W` feeds a discourse style classifier.

use ndarray::{s, Array1, Array2, Array3, Axis};

use crate::config::{ModelConfig, Stage2Config};
use crate::corpus::Discourse;
use crate::error::{Error, Result};
use crate::features::{Lpe, PhonemeTargets, LPE_DIM};
use crate::model_u::{cross_entropy, masked_mse3, output_to_features, Umpm, UmpmOutput};
use crate::nn::init::{uniform2, ParamRng, UNIFORM_SCALE};
use crate::nn::params::{visit_fields, visit_fields_mut};
use crate::nn::{AdditiveAttention, AttentionTrace, BiLstm, BiLstmTrace, Mlp, MlpTrace, Params};

#[derive(Debug, Clone, PartialEq)]
pub struct DmpmParams {
    /// `r → r`, split as `r / 2` per direction.
    pub context: BiLstm,
    /// `r × 3 × 3`
    pub d_adj: Array3<f64>,
    pub attention: AdditiveAttention,
    pub classifier: Mlp,
}

impl Params for DmpmParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        visit_fields!(self, prefix, f; context, d_adj, attention, classifier);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        visit_fields_mut!(self, prefix, f; context, d_adj, attention, classifier);
    }
}

impl DmpmParams {
    pub fn init(config: &ModelConfig, num_styles: usize, rng: &mut ParamRng) -> Result<Self> {
        config.validate()?;
        let r = config.r;
        let context = BiLstm::init(r, r / 2, rng);
        let d_adj = uniform2(r, LPE_DIM * LPE_DIM, UNIFORM_SCALE, rng)
            .into_shape_with_order((r, LPE_DIM, LPE_DIM))
            .expect("matching element count");
        let attention = AdditiveAttention::init(r, config.attention_dim, rng);
        let classifier = Mlp::init(r, config.classifier_hidden, num_styles, rng);
        Ok(Self {
            context,
            d_adj,
            attention,
            classifier,
        })
    }

    pub fn r(&self) -> usize {
        self.d_adj.dim().0
    }
}

/// Stage-1 outputs of one discourse, padded to the longest utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscourseBatch {
    /// `m × N_max × 3`, zero where masked.
    pub lpe_stage1: Array3<f64>,
    pub mask: Array2<bool>,
    /// `m × r`
    pub utterance_vectors: Array2<f64>,
    pub style_label: usize,
    /// Per-utterance stage-1 outputs, kept for export.
    pub stage1: Vec<UmpmOutput>,
}

impl DiscourseBatch {
    pub fn lengths(&self) -> Vec<usize> {
        self.mask
            .rows()
            .into_iter()
            .map(|r| r.iter().filter(|m| **m).count())
            .collect()
    }

    /// Runs the frozen utterance model on every utterance (inference path).
    pub fn from_stage1(model: &Umpm, discourse: &Discourse) -> Result<Self> {
        let m = discourse.utterances.len();
        if m == 0 {
            return Err(Error::Validation(format!(
                "discourse {} is empty",
                discourse.id
            )));
        }
        let mut outs = Vec::with_capacity(m);
        let mut vecs = Array2::zeros((m, model.r()));
        for (u, utt) in discourse.utterances.iter().enumerate() {
            let inp = model.prepare(utt)?;
            let (out, _) = model.forward_input(&inp, None)?;
            let enc = model.params.encoder.encode_traced(&inp.token_ids)?.0;
            vecs.row_mut(u).assign(&enc.utterance_vector);
            outs.push(out);
        }
        let n_max = outs.iter().map(UmpmOutput::len).max().unwrap_or(0);
        let mut lpe = Array3::zeros((m, n_max, LPE_DIM));
        let mut mask = Array2::from_elem((m, n_max), false);
        for (u, out) in outs.iter().enumerate() {
            for (p, row) in out.lpe_hat.iter().enumerate() {
                mask[[u, p]] = true;
                for k in 0..LPE_DIM {
                    lpe[[u, p, k]] = row[k];
                }
            }
        }
        Ok(Self {
            lpe_stage1: lpe,
            mask,
            utterance_vectors: vecs,
            style_label: discourse.style_label,
            stage1: outs,
        })
    }

    /// A copy with `extra` masked columns appended.
    pub fn with_padding(&self, extra: usize) -> Self {
        let (m, n, k) = self.lpe_stage1.dim();
        let mut lpe = Array3::zeros((m, n + extra, k));
        lpe.slice_mut(s![.., ..n, ..]).assign(&self.lpe_stage1);
        let mut mask = Array2::from_elem((m, n + extra), false);
        mask.slice_mut(s![.., ..n]).assign(&self.mask);
        Self {
            lpe_stage1: lpe,
            mask,
            ..self.clone()
        }
    }
}

/// `W`: the utterance vectors contextualised across the discourse.
pub fn contextualize(utterance_vectors: &Array2<f64>, params: &DmpmParams) -> Array2<f64> {
    params.context.forward(utterance_vectors).0
}

/// `delta[u,p,k] = Σ_r Σ_j D[r,j,k] · W[u,r] · lpe[u,p,j]` and
/// `lpe + delta`, both zero at masked positions.
pub fn adjust_lpe(
    d_adj: &Array3<f64>,
    w: &Array2<f64>,
    lpe_stage1: &Array3<f64>,
    mask: &Array2<bool>,
) -> Result<(Array3<f64>, Array3<f64>)> {
    let (r, j_dim, k_dim) = d_adj.dim();
    let (m, n, k) = lpe_stage1.dim();
    if w.dim() != (m, r) || j_dim != k || k_dim != k || mask.dim() != (m, n) {
        return Err(Error::Shape(format!(
            "adjustment tensor {:?}, context {:?}, lpe {:?}, mask {:?}",
            d_adj.dim(),
            w.dim(),
            lpe_stage1.dim(),
            mask.dim()
        )));
    }
    let mut delta = Array3::zeros((m, n, k));
    let mut fin = Array3::zeros((m, n, k));
    for u in 0..m {
        let mu = mix_matrix(d_adj, &w.row(u).to_owned());
        for p in 0..n {
            if !mask[[u, p]] {
                continue;
            }
            for kk in 0..k {
                let mut acc = 0.0;
                for j in 0..k {
                    acc += lpe_stage1[[u, p, j]] * mu[[j, kk]];
                }
                delta[[u, p, kk]] = acc;
                fin[[u, p, kk]] = lpe_stage1[[u, p, kk]] + acc;
            }
        }
    }
    Ok((delta, fin))
}

/// `M[j,k] = Σ_r w[r] · D[r,j,k]`
fn mix_matrix(d_adj: &Array3<f64>, w: &Array1<f64>) -> Array2<f64> {
    let (r, j, k) = d_adj.dim();
    let mut mu = Array2::zeros((j, k));
    for rr in 0..r {
        mu.scaled_add(w[rr], &d_adj.slice(s![rr, .., ..]));
    }
    mu
}

/// Attention pooling of `W` into one discourse vector.
pub fn pool_discourse(w: &Array2<f64>, params: &DmpmParams) -> (Array1<f64>, Vec<f64>) {
    let (v, tr) = params.attention.forward(w);
    (v, tr.weights)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscourseLambdas {
    pub lpe: f64,
    pub gse: f64,
}

impl Default for DiscourseLambdas {
    fn default() -> Self {
        Self::from(&Stage2Config::default())
    }
}

impl From<&Stage2Config> for DiscourseLambdas {
    fn from(c: &Stage2Config) -> Self {
        Self {
            lpe: c.lambda_lpe,
            gse: c.lambda_gse,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DiscourseComponents {
    pub lpe_mse: f64,
    pub style_ce: f64,
}

impl DiscourseComponents {
    pub fn total(&self, l: &DiscourseLambdas) -> f64 {
        l.lpe * self.lpe_mse + l.gse * self.style_ce
    }
}

/// Masked LPE MSE plus discourse-style cross-entropy. `lpe_*` and `mask`
/// stack the utterances of every discourse in the batch; `logits` has one
/// row per discourse. Returns the total, the components and the gradients
/// with respect to `lpe_final` and `logits`.
pub fn discourse_loss(
    lpe_final: &Array3<f64>,
    lpe_targets: &Array3<f64>,
    mask: &Array2<bool>,
    logits: &Array2<f64>,
    labels: &[usize],
    lambdas: &DiscourseLambdas,
) -> Result<(f64, DiscourseComponents, Array3<f64>, Array2<f64>)> {
    if !mask.iter().any(|m| *m) {
        return Err(Error::Validation(
            "discourse loss over an empty mask".into(),
        ));
    }
    if lpe_final.dim() != lpe_targets.dim() {
        return Err(Error::Shape(format!(
            "predictions {:?} vs targets {:?}",
            lpe_final.dim(),
            lpe_targets.dim()
        )));
    }
    if labels.len() != logits.nrows() {
        return Err(Error::length(
            "discourse labels",
            logits.nrows(),
            labels.len(),
        ));
    }
    let (lpe_mse, d_lpe) = masked_mse3(lpe_final, lpe_targets, mask, lambdas.lpe);
    let (style_ce, d_logits) = cross_entropy(logits, labels, lambdas.gse)?;
    let c = DiscourseComponents { lpe_mse, style_ce };
    Ok((c.total(lambdas), c, d_lpe, d_logits))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DmpmOutput {
    pub w: Array2<f64>,
    pub delta: Array3<f64>,
    pub lpe_final: Array3<f64>,
    pub attention_weights: Vec<f64>,
    pub style_logits: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct DmpmTrace {
    context: BiLstmTrace,
    attention: AttentionTrace,
    classifier: MlpTrace,
}

pub fn forward(batch: &DiscourseBatch, params: &DmpmParams) -> Result<(DmpmOutput, DmpmTrace)> {
    if batch.utterance_vectors.ncols() != params.r() {
        return Err(Error::Shape(format!(
            "utterance vectors have width {}, expected {}",
            batch.utterance_vectors.ncols(),
            params.r()
        )));
    }
    let (w, context) = params.context.forward(&batch.utterance_vectors);
    let (delta, lpe_final) = adjust_lpe(&params.d_adj, &w, &batch.lpe_stage1, &batch.mask)?;
    let (pooled, attention) = params.attention.forward(&w);
    let (logits, classifier) = params.classifier.forward(&pooled.insert_axis(Axis(0)));
    let out = DmpmOutput {
        attention_weights: attention.weights.clone(),
        style_logits: logits.row(0).to_vec(),
        w,
        delta,
        lpe_final,
    };
    Ok((
        out,
        DmpmTrace {
            context,
            attention,
            classifier,
        },
    ))
}

/// Accumulates parameter gradients from `dL/d lpe_final` (masked entries
/// ignored) and `dL/d logits`.
pub fn backward(
    batch: &DiscourseBatch,
    out: &DmpmOutput,
    tr: &DmpmTrace,
    d_lpe_final: &Array3<f64>,
    d_logits: &Array1<f64>,
    params: &DmpmParams,
    grad: &mut DmpmParams,
) {
    let (m, n, k) = batch.lpe_stage1.dim();
    let r = params.r();
    let d_row = d_logits.view().insert_axis(Axis(0)).to_owned();
    let d_pooled = params
        .classifier
        .backward(&tr.classifier, &d_row, &mut grad.classifier);
    let mut d_w = params.attention.backward(
        &tr.attention,
        &d_pooled.row(0).to_owned(),
        &mut grad.attention,
    );
    for u in 0..m {
        // dM[j,k] = Σ_p lpe[u,p,j] · dδ[u,p,k]
        let mut dm = Array2::<f64>::zeros((k, k));
        for p in 0..n {
            if !batch.mask[[u, p]] {
                continue;
            }
            for j in 0..k {
                let a = batch.lpe_stage1[[u, p, j]];
                for kk in 0..k {
                    dm[[j, kk]] += a * d_lpe_final[[u, p, kk]];
                }
            }
        }
        for rr in 0..r {
            let wr = out.w[[u, rr]];
            let mut g = grad.d_adj.slice_mut(s![rr, .., ..]);
            g.scaled_add(wr, &dm);
            d_w[[u, rr]] += (&params.d_adj.slice(s![rr, .., ..]) * &dm).sum();
        }
    }
    params
        .context
        .backward(&tr.context, &d_w, &mut grad.context);
}

/// A frozen utterance model plus the trainable discourse parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Dmpm {
    pub stage1: Umpm,
    pub params: DmpmParams,
}

/// Per-utterance predictions of the full two-stage model.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscoursePrediction {
    /// `(exported, raw)` feature rows per utterance.
    pub features: Vec<(PhonemeTargets, PhonemeTargets)>,
    pub utterance_logits: Vec<Vec<f64>>,
    pub discourse_logits: Vec<f64>,
    pub attention_weights: Vec<f64>,
}

impl Dmpm {
    pub fn new(stage1: Umpm, rng: &mut ParamRng) -> Result<Self> {
        let params = DmpmParams::init(&stage1.config, stage1.inventory.num_styles, rng)?;
        Self::from_parts(stage1, params)
    }

    pub fn from_parts(stage1: Umpm, params: DmpmParams) -> Result<Self> {
        if params.r() != stage1.r() || params.context.output_dim() != stage1.r() {
            return Err(Error::Shape(format!(
                "discourse parameters built for r = {}, utterance model has r = {}",
                params.r(),
                stage1.r()
            )));
        }
        if params.classifier.output_dim() != stage1.inventory.num_styles {
            return Err(Error::Shape(
                "discourse classifier size differs from style count".into(),
            ));
        }
        Ok(Self { stage1, params })
    }

    pub fn batch(&self, discourse: &Discourse) -> Result<DiscourseBatch> {
        DiscourseBatch::from_stage1(&self.stage1, discourse)
    }

    /// Inference on one discourse: pitch/energy from stage 1, LPE adjusted.
    pub fn predict(&self, discourse: &Discourse) -> Result<DiscoursePrediction> {
        let batch = self.batch(discourse)?;
        let (out, _) = forward(&batch, &self.params)?;
        let norm = &self.stage1.norm;
        let mut features = Vec::with_capacity(batch.stage1.len());
        for (u, (utt, s1)) in discourse.utterances.iter().zip(&batch.stage1).enumerate() {
            let lpe_hat: Vec<Lpe> = (0..s1.len())
                .map(|p| std::array::from_fn(|k| out.lpe_final[[u, p, k]]))
                .collect();
            let merged = UmpmOutput {
                pitch_hat: s1.pitch_hat.iter().map(|&v| norm.pitch_out(v)).collect(),
                energy_hat: s1.energy_hat.iter().map(|&v| norm.energy_out(v)).collect(),
                lpe_hat,
                style_logits: s1.style_logits.clone(),
            };
            features.push(output_to_features(&utt.id, &merged));
        }
        Ok(DiscoursePrediction {
            features,
            utterance_logits: batch
                .stage1
                .iter()
                .map(|o| o.style_logits.clone())
                .collect(),
            discourse_logits: out.style_logits,
            attention_weights: out.attention_weights,
        })
    }
}

/// Stacks per-discourse LPE targets in the layout of [`DiscourseBatch`].
pub fn stack_targets(targets: &[&PhonemeTargets], n_max: usize) -> Result<Array3<f64>> {
    let mut out = Array3::zeros((targets.len(), n_max, LPE_DIM));
    for (u, t) in targets.iter().enumerate() {
        if t.len() > n_max {
            return Err(Error::length("padded target length", n_max, t.len()));
        }
        for (p, row) in t.lpe.iter().enumerate() {
            for k in 0..LPE_DIM {
                out[[u, p, k]] = row[k];
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn params(r: usize, seed: u64) -> DmpmParams {
        let cfg = ModelConfig {
            d: 4,
            r,
            attention_dim: 3,
            classifier_hidden: 3,
            ..ModelConfig::default()
        };
        DmpmParams::init(&cfg, 2, &mut ParamRng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn zero_context_is_neutral() {
        let p = params(2, 0);
        let lpe = Array3::from_shape_fn((2, 3, 3), |(u, n, k)| (u + n + k) as f64 * 0.1);
        let mask = Array2::from_elem((2, 3), true);
        let (delta, fin) = adjust_lpe(&p.d_adj, &Array2::zeros((2, 2)), &lpe, &mask).unwrap();
        assert!(delta.iter().all(|v| *v == 0.0));
        assert_eq!(fin, lpe);
    }

    #[test]
    fn diagonal_tensor_scales() {
        let mut d = Array3::zeros((2, 3, 3));
        for k in 0..3 {
            d[[1, k, k]] = 0.5;
        }
        let w = ndarray::arr2(&[[0.0, 1.0]]);
        let lpe = Array3::from_shape_fn((1, 2, 3), |(_, n, k)| 0.2 + 0.1 * (n * 3 + k) as f64);
        let mask = Array2::from_elem((1, 2), true);
        let (delta, _) = adjust_lpe(&d, &w, &lpe, &mask).unwrap();
        for (a, b) in delta.iter().zip(lpe.iter()) {
            assert!((a - 0.5 * b).abs() < 1e-15);
        }
    }

    #[test]
    fn masked_positions_are_zero() {
        let p = params(2, 1);
        let lpe = Array3::from_elem((1, 2, 3), 0.7);
        let mask = ndarray::arr2(&[[true, false]]);
        let w = ndarray::arr2(&[[0.3, -0.4]]);
        let (delta, fin) = adjust_lpe(&p.d_adj, &w, &lpe, &mask).unwrap();
        assert!(delta.slice(s![0, 1, ..]).iter().all(|v| *v == 0.0));
        assert!(fin.slice(s![0, 1, ..]).iter().all(|v| *v == 0.0));
        assert!(adjust_lpe(&p.d_adj, &Array2::zeros((2, 2)), &lpe, &mask).is_err());
    }

    #[test]
    fn single_utterance_attention_is_one() {
        let p = params(4, 2);
        let w = Array2::from_shape_fn((1, 4), |(_, c)| c as f64);
        let (v, weights) = pool_discourse(&w, &p);
        assert_eq!(weights, [1.0]);
        assert_eq!(v, w.row(0));
    }

    #[test]
    fn empty_mask_rejected() {
        let z = Array3::zeros((1, 2, 3));
        let mask = Array2::from_elem((1, 2), false);
        let logits = Array2::zeros((1, 2));
        assert!(
            discourse_loss(&z, &z, &mask, &logits, &[0], &DiscourseLambdas::default()).is_err()
        );
    }
}
