//! Seeded parameter initialisation.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub type ParamRng = ChaCha8Rng;

/// Default range of the uniform initialiser.
pub const UNIFORM_SCALE: f64 = 0.1;

pub fn uniform2(rows: usize, cols: usize, scale: f64, rng: &mut ParamRng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-scale..=scale))
}

pub fn uniform1(len: usize, scale: f64, rng: &mut ParamRng) -> Array1<f64> {
    Array1::from_shape_simple_fn(len, || rng.gen_range(-scale..=scale))
}

/// A square matrix with orthonormal rows: uniform draws followed by modified
/// Gram-Schmidt. A numerically dependent row is redrawn.
pub fn orthogonal(n: usize, rng: &mut ParamRng) -> Array2<f64> {
    let mut m = Array2::<f64>::zeros((n, n));
    let mut i = 0;
    while i < n {
        let mut row: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        for j in 0..i {
            let prev = m.row(j);
            let dot: f64 = row.iter().zip(prev.iter()).map(|(a, b)| a * b).sum();
            for (r, p) in row.iter_mut().zip(prev.iter()) {
                *r -= dot * p;
            }
        }
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-6 {
            continue;
        }
        for (dst, r) in m.row_mut(i).iter_mut().zip(&row) {
            *dst = r / norm;
        }
        i += 1;
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn orthogonal_rows() {
        let mut rng = ParamRng::seed_from_u64(5);
        let q = orthogonal(6, &mut rng);
        let qqt = q.dot(&q.t());
        for i in 0..6 {
            for j in 0..6 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((qqt[[i, j]] - want).abs() < 1e-12);
            }
        }
    }
}
