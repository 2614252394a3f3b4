//! Tensor arithmetic and the gradient contract used by every trainable piece.

mod tape;
mod tensor;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub(crate) use tape::poincare_distance_raw;
pub use tape::{patchify, BoundParams, Gradients, Tape, Var};
pub use tensor::{
    acosh_clamped, artanh_clamped, sigmoid, BinaryOp, ReduceOp, Tensor, UnaryOp, ARTANH_CLAMP, DOMAIN_TOLERANCE,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("axis {axis} out of range for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("reduction over an empty axis")]
    EmptyReduction,
    #[error("{op} argument {value} outside its domain")]
    Domain { op: &'static str, value: f64 },
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
}

/// Named parameter tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Keeps only the parameters whose names satisfy `keep`.
    pub fn retain(&mut self, keep: impl Fn(&str) -> bool) {
        self.tensors.retain(|k, _| keep(k));
    }

    pub fn zeros_like(&self) -> ParamStore {
        ParamStore { tensors: self.tensors.iter().map(|(k, t)| (k.clone(), Tensor::zeros(t.shape()))).collect() }
    }
}

/// A scalar value together with the gradient of every parameter.
#[derive(Clone, Debug)]
pub struct GradBundle {
    pub value: Tensor,
    pub grads: BTreeMap<String, Tensor>,
}

impl GradBundle {
    /// Checks that every gradient has the shape of its parameter.
    pub fn check_shapes(&self, params: &ParamStore) -> Result<(), TensorError> {
        for (name, g) in &self.grads {
            let p = params.get(name).ok_or_else(|| TensorError::UnknownParameter(name.clone()))?;
            if p.shape() != g.shape() {
                return Err(TensorError::ShapeMismatch(format!(
                    "gradient of `{name}` has shape {:?}, parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Evaluates `f` on a fresh tape with every parameter bound and returns its
/// value and parameter gradients.
pub fn grad_of<E>(
    params: &ParamStore,
    f: impl FnOnce(&mut Tape<'_>, &BoundParams) -> Result<Var, E>,
) -> Result<GradBundle, E>
where
    E: From<TensorError>,
{
    let mut tape = Tape::new();
    let bound = tape.bind(params);
    let out = f(&mut tape, &bound)?;
    let value = tape.value(out).clone();
    value.check_finite()?;
    let grads = tape.backward(out).params(&bound, params);
    Ok(GradBundle { value, grads })
}

#[cfg(test)]
pub(crate) mod fd {
    //! Central finite differences used by the unit tests of differentiable code.

    use super::*;

    pub const STEP: f64 = 1e-5;

    pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
        (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
    }

    /// Checks every coordinate of `x` for `f: R^n -> R` against the tape gradient.
    pub fn check_vector(x: &[f64], f: impl Fn(&mut Tape<'_>, Var) -> Var, tol: f64) {
        let eval = |v: &[f64]| {
            let mut t = Tape::new();
            let xv = t.variable(Tensor::vector(v.to_vec()));
            let out = f(&mut t, xv);
            t.scalar(out)
        };
        let mut t = Tape::new();
        let xv = t.variable(Tensor::vector(x.to_vec()));
        let out = f(&mut t, xv);
        let grads = t.backward(out);
        let zero = Tensor::zeros(&[x.len()]);
        let g = grads.get(xv).unwrap_or(&zero);
        for i in 0..x.len() {
            let mut plus = x.to_vec();
            let mut minus = x.to_vec();
            plus[i] += STEP;
            minus[i] -= STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * STEP);
            let e = rel_err(g.data()[i], numeric);
            assert!(e < tol, "coordinate {i}: analytic {} numeric {numeric} rel err {e}", g.data()[i]);
        }
    }
}
