use ndarray::{concatenate, s, Array1, Array2, Axis};

use super::init::{orthogonal, uniform1, uniform2, ParamRng, UNIFORM_SCALE};
use super::params::{visit_fields, visit_fields_mut, Params};
use super::sigmoid;

/// Single-direction LSTM. Gate blocks are stacked in the order
/// input, forget, cell candidate, output.
#[derive(Debug, Clone, PartialEq)]
pub struct Lstm {
    /// `4h × in`
    pub w_ih: Array2<f64>,
    /// `4h × h`
    pub w_hh: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct LstmTrace {
    reverse: bool,
    x: Array2<f64>,
    /// Activated gates, `T × 4h`.
    gates: Array2<f64>,
    cell: Array2<f64>,
    tanh_cell: Array2<f64>,
    pub hidden: Array2<f64>,
}

impl LstmTrace {
    /// Hidden state after the last processed step (position 0 when reversed).
    pub fn final_hidden(&self) -> Array1<f64> {
        let t = self.hidden.nrows();
        let h = self.hidden.ncols();
        if t == 0 {
            return Array1::zeros(h);
        }
        let last = if self.reverse { 0 } else { t - 1 };
        self.hidden.row(last).to_owned()
    }

    pub fn final_position(&self) -> Option<usize> {
        let t = self.hidden.nrows();
        match (t, self.reverse) {
            (0, _) => None,
            (_, true) => Some(0),
            (_, false) => Some(t - 1),
        }
    }
}

impl Lstm {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            w_ih: Array2::zeros((4 * hidden, input)),
            w_hh: Array2::zeros((4 * hidden, hidden)),
            bias: Array1::zeros(4 * hidden),
        }
    }

    /// Uniform input weights and bias; each recurrent gate block orthogonal.
    pub fn init(input: usize, hidden: usize, rng: &mut ParamRng) -> Self {
        let w_ih = uniform2(4 * hidden, input, UNIFORM_SCALE, rng);
        let mut w_hh = Array2::zeros((4 * hidden, hidden));
        for g in 0..4 {
            w_hh.slice_mut(s![g * hidden..(g + 1) * hidden, ..])
                .assign(&orthogonal(hidden, rng));
        }
        let bias = uniform1(4 * hidden, UNIFORM_SCALE, rng);
        Self { w_ih, w_hh, bias }
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_hh.ncols()
    }

    pub fn input_dim(&self) -> usize {
        self.w_ih.ncols()
    }

    pub fn forward(&self, x: &Array2<f64>, reverse: bool) -> LstmTrace {
        let steps = x.nrows();
        let h = self.hidden_dim();
        let pre = x.dot(&self.w_ih.t()) + &self.bias;
        let mut gates = Array2::zeros((steps, 4 * h));
        let mut cell = Array2::zeros((steps, h));
        let mut tanh_cell = Array2::zeros((steps, h));
        let mut hidden = Array2::zeros((steps, h));
        let whh = self.w_hh.as_slice().expect("contiguous");
        let mut h_prev = vec![0.0; h];
        let mut c_prev = vec![0.0; h];
        let mut z = vec![0.0; 4 * h];
        for step in 0..steps {
            let t = if reverse { steps - 1 - step } else { step };
            for (g, zg) in z.iter_mut().enumerate() {
                let row = &whh[g * h..(g + 1) * h];
                *zg = pre[[t, g]] + row.iter().zip(&h_prev).map(|(w, hp)| w * hp).sum::<f64>();
            }
            for j in 0..h {
                let i_g = sigmoid(z[j]);
                let f_g = sigmoid(z[h + j]);
                let c_g = z[2 * h + j].tanh();
                let o_g = sigmoid(z[3 * h + j]);
                let c = f_g * c_prev[j] + i_g * c_g;
                let tc = c.tanh();
                gates[[t, j]] = i_g;
                gates[[t, h + j]] = f_g;
                gates[[t, 2 * h + j]] = c_g;
                gates[[t, 3 * h + j]] = o_g;
                cell[[t, j]] = c;
                tanh_cell[[t, j]] = tc;
                hidden[[t, j]] = o_g * tc;
                c_prev[j] = c;
                h_prev[j] = o_g * tc;
            }
        }
        LstmTrace {
            reverse,
            x: x.clone(),
            gates,
            cell,
            tanh_cell,
            hidden,
        }
    }

    /// Backpropagation through time. `d_hidden` is `dL/dh_t` for every
    /// position; returns `dL/dx`.
    pub fn backward(&self, tr: &LstmTrace, d_hidden: &Array2<f64>, grad: &mut Lstm) -> Array2<f64> {
        let steps = tr.x.nrows();
        let h = self.hidden_dim();
        let whh = self.w_hh.as_slice().expect("contiguous");
        let pos = |step: usize| if tr.reverse { steps - 1 - step } else { step };
        let mut dpre = Array2::<f64>::zeros((steps, 4 * h));
        let mut h_prev_mat = Array2::<f64>::zeros((steps, h));
        let mut dh_next = vec![0.0; h];
        let mut dc_next = vec![0.0; h];
        for step in (0..steps).rev() {
            let t = pos(step);
            let prev = step.checked_sub(1).map(pos);
            if let Some(p) = prev {
                h_prev_mat.row_mut(t).assign(&tr.hidden.row(p));
            }
            for j in 0..h {
                let i_g = tr.gates[[t, j]];
                let f_g = tr.gates[[t, h + j]];
                let c_g = tr.gates[[t, 2 * h + j]];
                let o_g = tr.gates[[t, 3 * h + j]];
                let tc = tr.tanh_cell[[t, j]];
                let c_prev = prev.map_or(0.0, |p| tr.cell[[p, j]]);
                let dh = d_hidden[[t, j]] + dh_next[j];
                let d_o = dh * tc;
                let dc = dh * o_g * (1.0 - tc * tc) + dc_next[j];
                dc_next[j] = dc * f_g;
                dpre[[t, j]] = dc * c_g * i_g * (1.0 - i_g);
                dpre[[t, h + j]] = dc * c_prev * f_g * (1.0 - f_g);
                dpre[[t, 2 * h + j]] = dc * i_g * (1.0 - c_g * c_g);
                dpre[[t, 3 * h + j]] = d_o * o_g * (1.0 - o_g);
            }
            dh_next.fill(0.0);
            for g in 0..4 * h {
                let d = dpre[[t, g]];
                if d != 0.0 {
                    let row = &whh[g * h..(g + 1) * h];
                    for (acc, w) in dh_next.iter_mut().zip(row) {
                        *acc += w * d;
                    }
                }
            }
        }
        grad.w_ih += &dpre.t().dot(&tr.x);
        grad.w_hh += &dpre.t().dot(&h_prev_mat);
        grad.bias += &dpre.sum_axis(Axis(0));
        dpre.dot(&self.w_ih)
    }
}

impl Params for Lstm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        visit_fields!(self, prefix, f; w_ih, w_hh, bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        visit_fields_mut!(self, prefix, f; w_ih, w_hh, bias);
    }
}

/// Forward and backward LSTMs over the same input; outputs are concatenated
/// `[forward | backward]` per position.
#[derive(Debug, Clone, PartialEq)]
pub struct BiLstm {
    pub fwd: Lstm,
    pub bwd: Lstm,
}

#[derive(Debug, Clone)]
pub struct BiLstmTrace {
    pub fwd: LstmTrace,
    pub bwd: LstmTrace,
}

impl BiLstm {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            fwd: Lstm::zeros(input, hidden),
            bwd: Lstm::zeros(input, hidden),
        }
    }

    pub fn init(input: usize, hidden: usize, rng: &mut ParamRng) -> Self {
        let fwd = Lstm::init(input, hidden, rng);
        let bwd = Lstm::init(input, hidden, rng);
        Self { fwd, bwd }
    }

    pub fn output_dim(&self) -> usize {
        2 * self.fwd.hidden_dim()
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, BiLstmTrace) {
        let fwd = self.fwd.forward(x, false);
        let bwd = self.bwd.forward(x, true);
        let out = concatenate(Axis(1), &[fwd.hidden.view(), bwd.hidden.view()])
            .expect("equal row counts");
        (out, BiLstmTrace { fwd, bwd })
    }

    pub fn backward(
        &self,
        tr: &BiLstmTrace,
        d_out: &Array2<f64>,
        grad: &mut BiLstm,
    ) -> Array2<f64> {
        let h = self.fwd.hidden_dim();
        let d_f = d_out.slice(s![.., ..h]).to_owned();
        let d_b = d_out.slice(s![.., h..]).to_owned();
        let dx = self.fwd.backward(&tr.fwd, &d_f, &mut grad.fwd);
        dx + self.bwd.backward(&tr.bwd, &d_b, &mut grad.bwd)
    }
}

impl Params for BiLstm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        visit_fields!(self, prefix, f; fwd, bwd);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        visit_fields_mut!(self, prefix, f; fwd, bwd);
    }
}

/// Stack of bidirectional layers; layer `k+1` reads the `2h` output of `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedBiLstm {
    pub layers: Vec<BiLstm>,
}

#[derive(Debug, Clone)]
pub struct StackedBiLstmTrace {
    layers: Vec<BiLstmTrace>,
}

impl StackedBiLstm {
    pub fn zeros(input: usize, hidden: usize, depth: usize) -> Self {
        let layers = (0..depth)
            .map(|k| BiLstm::zeros(if k == 0 { input } else { 2 * hidden }, hidden))
            .collect();
        Self { layers }
    }

    pub fn init(input: usize, hidden: usize, depth: usize, rng: &mut ParamRng) -> Self {
        let layers = (0..depth)
            .map(|k| BiLstm::init(if k == 0 { input } else { 2 * hidden }, hidden, rng))
            .collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fwd.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("at least one layer").output_dim()
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, StackedBiLstmTrace) {
        let mut cur = x.clone();
        let mut traces = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (out, tr) = layer.forward(&cur);
            traces.push(tr);
            cur = out;
        }
        (cur, StackedBiLstmTrace { layers: traces })
    }

    pub fn backward(
        &self,
        tr: &StackedBiLstmTrace,
        d_out: &Array2<f64>,
        grad: &mut StackedBiLstm,
    ) -> Array2<f64> {
        let mut d = d_out.clone();
        for k in (0..self.layers.len()).rev() {
            d = self.layers[k].backward(&tr.layers[k], &d, &mut grad.layers[k]);
        }
        d
    }
}

impl Params for StackedBiLstm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        visit_fields!(self, prefix, f; layers);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        visit_fields_mut!(self, prefix, f; layers);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::zeroed;
    use rand::SeedableRng;

    fn loss(out: &Array2<f64>, w: &Array2<f64>) -> f64 {
        (out * w).sum()
    }

    #[test]
    fn zero_params_zero_output() {
        let l = StackedBiLstm::zeros(3, 4, 2);
        let x = Array2::from_shape_fn((5, 3), |(i, j)| (i + j) as f64);
        let (out, _) = l.forward(&x);
        assert_eq!(out.dim(), (5, 8));
        assert!(out.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn unidirectional_reversal() {
        // A single-direction LSTM run in reverse equals the forward run on
        // the reversed sequence, reversed back.
        let mut rng = ParamRng::seed_from_u64(1);
        let l = Lstm::init(3, 4, &mut rng);
        let x = uniform2(6, 3, 1.0, &mut rng);
        let rev_x = x.slice(s![..;-1, ..]).to_owned();
        let a = l.forward(&x, true).hidden;
        let b = l.forward(&rev_x, false).hidden;
        let b_back = b.slice(s![..;-1, ..]).to_owned();
        assert_eq!(a, b_back);
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut rng = ParamRng::seed_from_u64(2);
        let l = StackedBiLstm::init(3, 2, 2, &mut rng);
        let x = uniform2(4, 3, 1.0, &mut rng);
        let w = uniform2(4, 4, 1.0, &mut rng);
        let (_, tr) = l.forward(&x);
        let mut g = zeroed(&l);
        let dx = l.backward(&tr, &w, &mut g);
        let eps = 1e-6;
        for i in 0..4 {
            for j in 0..3 {
                let mut xp = x.clone();
                xp[[i, j]] += eps;
                let mut xm = x.clone();
                xm[[i, j]] -= eps;
                let num = (loss(&l.forward(&xp).0, &w) - loss(&l.forward(&xm).0, &w)) / (2.0 * eps);
                assert!((num - dx[[i, j]]).abs() < 1e-8, "{num} vs {}", dx[[i, j]]);
            }
        }
    }
}
