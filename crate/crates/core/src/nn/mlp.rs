use ndarray::Array2;

use super::init::ParamRng;
use super::linear::Linear;
use super::params::{visit_fields, visit_fields_mut, Params};

/// Two-layer perceptron with a tanh hidden layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub hidden: Linear,
    pub output: Linear,
}

#[derive(Debug, Clone)]
pub struct MlpTrace {
    x: Array2<f64>,
    act: Array2<f64>,
}

impl Mlp {
    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        Self {
            hidden: Linear::zeros(input, hidden),
            output: Linear::zeros(hidden, output),
        }
    }

    pub fn init(input: usize, hidden: usize, output: usize, rng: &mut ParamRng) -> Self {
        let h = Linear::init(input, hidden, rng);
        let o = Linear::init(hidden, output, rng);
        Self {
            hidden: h,
            output: o,
        }
    }

    pub fn output_dim(&self) -> usize {
        self.output.output_dim()
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, MlpTrace) {
        let act = self.hidden.forward(x).mapv(f64::tanh);
        let out = self.output.forward(&act);
        (out, MlpTrace { x: x.clone(), act })
    }

    pub fn backward(&self, tr: &MlpTrace, d_out: &Array2<f64>, grad: &mut Mlp) -> Array2<f64> {
        let d_act = self.output.backward(&tr.act, d_out, &mut grad.output);
        let d_pre = d_act * tr.act.mapv(|a| 1.0 - a * a);
        self.hidden.backward(&tr.x, &d_pre, &mut grad.hidden)
    }
}

impl Params for Mlp {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        visit_fields!(self, prefix, f; hidden, output);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        visit_fields_mut!(self, prefix, f; hidden, output);
    }
}
