use ndarray::{Array1, Array2};

use super::init::{uniform1, ParamRng, UNIFORM_SCALE};
use super::linear::Linear;
use super::params::{visit_fields, visit_fields_mut, Params};
use super::softmax;

/// Additive (Bahdanau-style) attention pooling:
/// `score_u = v · tanh(A x_u + b)`, `α = softmax(score)`, `c = Σ α_u x_u`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdditiveAttention {
    pub proj: Linear,
    pub score: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct AttentionTrace {
    x: Array2<f64>,
    act: Array2<f64>,
    pub weights: Vec<f64>,
}

impl AdditiveAttention {
    pub fn zeros(input: usize, attn: usize) -> Self {
        Self {
            proj: Linear::zeros(input, attn),
            score: Array1::zeros(attn),
        }
    }

    pub fn init(input: usize, attn: usize, rng: &mut ParamRng) -> Self {
        let proj = Linear::init(input, attn, rng);
        let score = uniform1(attn, UNIFORM_SCALE, rng);
        Self { proj, score }
    }

    /// Pools the rows of `x` (`m × r`) into one `r`-vector.
    pub fn forward(&self, x: &Array2<f64>) -> (Array1<f64>, AttentionTrace) {
        let act = self.proj.forward(x).mapv(f64::tanh);
        let scores: Vec<f64> = act.rows().into_iter().map(|a| a.dot(&self.score)).collect();
        let weights = softmax(&scores);
        let mut pooled = Array1::zeros(x.ncols());
        for (row, w) in x.rows().into_iter().zip(&weights) {
            pooled.scaled_add(*w, &row);
        }
        (
            pooled,
            AttentionTrace {
                x: x.clone(),
                act,
                weights,
            },
        )
    }

    pub fn backward(
        &self,
        tr: &AttentionTrace,
        d_pooled: &Array1<f64>,
        grad: &mut AdditiveAttention,
    ) -> Array2<f64> {
        let m = tr.x.nrows();
        let mut dx = Array2::zeros(tr.x.dim());
        let d_weight: Vec<f64> =
            tr.x.rows()
                .into_iter()
                .map(|row| row.dot(d_pooled))
                .collect();
        let mean: f64 = tr.weights.iter().zip(&d_weight).map(|(a, d)| a * d).sum();
        let mut d_act = Array2::zeros(tr.act.dim());
        for u in 0..m {
            let w = tr.weights[u];
            dx.row_mut(u).scaled_add(w, d_pooled);
            let d_score = w * (d_weight[u] - mean);
            grad.score.scaled_add(d_score, &tr.act.row(u));
            for (k, d) in d_act.row_mut(u).iter_mut().enumerate() {
                let a = tr.act[[u, k]];
                *d = d_score * self.score[k] * (1.0 - a * a);
            }
        }
        dx + self.proj.backward(&tr.x, &d_act, &mut grad.proj)
    }
}

impl Params for AdditiveAttention {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        visit_fields!(self, prefix, f; proj, score);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        visit_fields_mut!(self, prefix, f; proj, score);
    }
}
