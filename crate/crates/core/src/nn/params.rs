use sha2::{Digest, Sha256};

/// Named, flat access to every trainable tensor of a layer or model.
///
/// Both visitors must walk tensors in the same, fixed order.
pub trait Params {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64]));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64]));
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

pub fn flatten(p: &dyn Params, prefix: &str) -> Vec<NamedTensor> {
    let mut out = Vec::new();
    p.visit(prefix, &mut |name, shape, values| {
        out.push(NamedTensor {
            name: name.to_string(),
            shape: shape.to_vec(),
            values: values.to_vec(),
        })
    });
    out
}

/// A copy of `p` with every tensor set to zero, used as gradient storage.
pub fn zeroed<T: Params + Clone>(p: &T) -> T {
    let mut z = p.clone();
    z.visit_mut("", &mut |_, v| v.fill(0.0));
    z
}

pub fn num_params(p: &dyn Params) -> usize {
    let mut n = 0;
    p.visit("", &mut |_, _, v| n += v.len());
    n
}

/// `dst += s * src`, tensor by tensor.
pub fn add_scaled<T: Params>(dst: &mut T, src: &T, s: f64) {
    let flat = flatten(src, "");
    let mut i = 0;
    dst.visit_mut("", &mut |_, v| {
        for (d, x) in v.iter_mut().zip(&flat[i].values) {
            *d += s * x;
        }
        i += 1;
    });
}

pub fn scale(p: &mut dyn Params, s: f64) {
    p.visit_mut("", &mut |_, v| v.iter_mut().for_each(|x| *x *= s));
}

pub fn global_norm(p: &dyn Params) -> f64 {
    let mut sq = 0.0;
    p.visit("", &mut |_, _, v| {
        sq += v.iter().map(|x| x * x).sum::<f64>()
    });
    sq.sqrt()
}

/// Name of the first tensor holding a NaN or infinity.
pub fn first_non_finite(p: &dyn Params, prefix: &str) -> Option<String> {
    let mut found = None;
    p.visit(prefix, &mut |name, _, v| {
        if found.is_none() && v.iter().any(|x| !x.is_finite()) {
            found = Some(name.to_string());
        }
    });
    found
}

/// SHA-256 over tensor names, shapes and the exact value bits.
pub fn digest(p: &dyn Params, prefix: &str) -> String {
    let mut h = Sha256::new();
    p.visit(prefix, &mut |name, shape, values| {
        h.update(name.as_bytes());
        for d in shape {
            h.update((*d as u64).to_le_bytes());
        }
        for v in values {
            h.update(v.to_bits().to_le_bytes());
        }
    });
    hex::encode(h.finalize())
}

macro_rules! visit_fields {
    ($self:ident, $prefix:ident, $f:ident; $($field:ident),+ $(,)?) => {
        $(
            $crate::nn::Params::visit(&$self.$field, &$crate::nn::join($prefix, stringify!($field)), $f);
        )+
    };
}

macro_rules! visit_fields_mut {
    ($self:ident, $prefix:ident, $f:ident; $($field:ident),+ $(,)?) => {
        $(
            $crate::nn::Params::visit_mut(&mut $self.$field, &$crate::nn::join($prefix, stringify!($field)), $f);
        )+
    };
}

pub(crate) use {visit_fields, visit_fields_mut};

impl<D: ndarray::Dimension> Params for ndarray::Array<f64, D> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        f(
            prefix,
            self.shape(),
            self.as_slice().expect("parameter arrays are contiguous"),
        );
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(
            prefix,
            self.as_slice_mut()
                .expect("parameter arrays are contiguous"),
        );
    }
}

impl<T: Params> Params for Vec<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        for (i, item) in self.iter().enumerate() {
            item.visit(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        for (i, item) in self.iter_mut().enumerate() {
            item.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}
