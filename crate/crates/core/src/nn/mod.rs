//! Small float64 neural-network layers with hand-written backward passes.
//!
//! Every layer follows the same shape: `forward` returns the output plus a
//! trace holding what the backward pass needs, and `backward` accumulates
//! parameter gradients into a zero-initialised twin of the layer and returns
//! the gradient with respect to the layer input.

mod adam;
mod attention;
pub mod init;
mod linear;
mod lstm;
mod mlp;
pub(crate) mod params;

pub use adam::{Adam, AdamConfig};
pub use attention::{AdditiveAttention, AttentionTrace};
pub use linear::Linear;
pub use lstm::{BiLstm, BiLstmTrace, Lstm, LstmTrace, StackedBiLstm, StackedBiLstmTrace};
pub use mlp::{Mlp, MlpTrace};
pub use params::{
    add_scaled, digest, first_non_finite, flatten, global_norm, join, num_params, scale, zeroed,
    NamedTensor, Params,
};

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax.
pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Index of the largest value; the lowest index wins exact ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.5, 0.5, 0.1]), 0);
        assert_eq!(argmax(&[0.1, 0.7, 0.7]), 1);
        assert_eq!(argmax(&[0.0]), 0);
    }

    #[test]
    fn softmax_matches_log_sum_exp() {
        let xs = [1.0, -2.0, 0.5, 700.0];
        let p = softmax(&xs);
        let lse = log_sum_exp(&xs);
        for (pi, xi) in p.iter().zip(xs) {
            assert!((pi.ln() - (xi - lse)).abs() < 1e-12 || *pi == 0.0);
        }
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }
}
