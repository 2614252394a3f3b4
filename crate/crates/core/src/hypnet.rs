//! Hyperbolic layers: Möbius matrix maps, bias translation, the two-layer
//! encoder head and its Euclidean readout.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numcore::{ParamStore, Tape, Tensor, TensorError, Var};
use crate::poincare::{diff, BallPoint, PoincareError, MAX_NORM};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HypError {
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Ball(#[from] PoincareError),
}

pub const L1_WEIGHT: &str = "head.l1.weight";
pub const L1_BIAS: &str = "head.l1.bias";
pub const L2_WEIGHT: &str = "head.l2.weight";
pub const L2_BIAS: &str = "head.l2.bias";
pub const READOUT_WEIGHT: &str = "head.readout.weight";
pub const READOUT_BIAS: &str = "head.readout.bias";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadDims {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
}

impl Default for HeadDims {
    fn default() -> Self {
        HeadDims { input: 256, hidden: 256, output: 128 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HypLinearParams {
    /// `m x n` Euclidean matrix.
    pub weight: Tensor,
    pub bias: BallPoint,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HypEncoderParams {
    pub layer1: HypLinearParams,
    pub layer2: HypLinearParams,
    /// `1 x output` row.
    pub readout_weight: Tensor,
    pub readout_bias: f64,
}

impl HypLinearParams {
    fn validate(&self) -> Result<(usize, usize), HypError> {
        let [m, n] = self.weight.shape()[..] else {
            return Err(HypError::DimMismatch(format!("weight must be a matrix, got {:?}", self.weight.shape())));
        };
        if self.bias.dim() != m {
            return Err(HypError::DimMismatch(format!("bias has {} entries, weight {m} rows", self.bias.dim())));
        }
        Ok((m, n))
    }
}

impl HypEncoderParams {
    pub fn dims(&self) -> Result<HeadDims, HypError> {
        let (h, i) = self.layer1.validate()?;
        let (o, h2) = self.layer2.validate()?;
        if h != h2 {
            return Err(HypError::DimMismatch(format!("layer1 emits {h}, layer2 expects {h2}")));
        }
        if self.readout_weight.shape() != [1, o] {
            return Err(HypError::DimMismatch(format!("readout shape {:?}", self.readout_weight.shape())));
        }
        Ok(HeadDims { input: i, hidden: h, output: o })
    }

    pub fn to_store(&self, store: &mut ParamStore) {
        store.insert(L1_WEIGHT, self.layer1.weight.clone());
        store.insert(L1_BIAS, Tensor::vector(self.layer1.bias.coords().to_vec()));
        store.insert(L2_WEIGHT, self.layer2.weight.clone());
        store.insert(L2_BIAS, Tensor::vector(self.layer2.bias.coords().to_vec()));
        store.insert(READOUT_WEIGHT, self.readout_weight.clone());
        store.insert(READOUT_BIAS, Tensor::vector(vec![self.readout_bias]));
    }

    pub fn from_store(store: &ParamStore) -> Result<Self, HypError> {
        let get = |name: &str| {
            store.get(name).cloned().ok_or_else(|| HypError::Tensor(TensorError::UnknownParameter(name.into())))
        };
        let p = HypEncoderParams {
            layer1: HypLinearParams { weight: get(L1_WEIGHT)?, bias: BallPoint::new(get(L1_BIAS)?.into_data())? },
            layer2: HypLinearParams { weight: get(L2_WEIGHT)?, bias: BallPoint::new(get(L2_BIAS)?.into_data())? },
            readout_weight: get(READOUT_WEIGHT)?,
            readout_bias: get(READOUT_BIAS)?.item(),
        };
        p.dims()?;
        Ok(p)
    }
}

/// Head parameters as tape variables.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub l1_weight: Var,
    pub l1_bias: Var,
    pub l2_weight: Var,
    pub l2_bias: Var,
    pub readout_weight: Var,
    pub readout_bias: Var,
}

impl HeadVars {
    pub fn from_bound(b: &crate::numcore::BoundParams) -> Self {
        HeadVars {
            l1_weight: b.get(L1_WEIGHT),
            l1_bias: b.get(L1_BIAS),
            l2_weight: b.get(L2_WEIGHT),
            l2_bias: b.get(L2_BIAS),
            readout_weight: b.get(READOUT_WEIGHT),
            readout_bias: b.get(READOUT_BIAS),
        }
    }
}

/// Whether the head runs in hyperbolic space or as a plain Euclidean MLP.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Geometry {
    #[default]
    Hyperbolic,
    Euclidean,
}

pub mod tape_ops {
    //! Head layers recorded on a tape.

    use super::*;

    /// `tanh((|Mx| / |x|) artanh |x|) Mx / |Mx|`, zero when `x = 0` or `Mx = 0`.
    pub fn mobius_matvec(t: &mut Tape<'_>, m: Var, x: Var) -> Var {
        let mx = t.matvec(m, x);
        let k = t.artanh_ratio(x);
        let y = t.tanh_dir(mx, k);
        t.project(y, MAX_NORM)
    }

    /// Bias translation `exp_x((lambda_0 / lambda_x) log_0(b))`.
    pub fn bias_translate(t: &mut Tape<'_>, x: Var, bias: Var) -> Var {
        let b = t.project(bias, MAX_NORM);
        let lb = diff::log0(t, b);
        let xx = t.sum_sq(x);
        let ratio = t.affine(xx, -1.0, 1.0);
        let u = t.scale(lb, ratio);
        diff::exp_map(t, x, u)
    }

    pub fn hyp_linear(t: &mut Tape<'_>, weight: Var, bias: Var, x: Var) -> Var {
        let y = mobius_matvec(t, weight, x);
        bias_translate(t, y, bias)
    }

    fn euclid_linear(t: &mut Tape<'_>, weight: Var, bias: Var, x: Var) -> Var {
        let y = t.matvec(weight, x);
        t.add(y, bias)
    }

    /// Lifts a Euclidean vector to the ball and applies both layers. In
    /// Euclidean geometry the lift is the identity and the layers are affine
    /// with a ReLU in between.
    pub fn hyp_encode(t: &mut Tape<'_>, head: &HeadVars, e: Var, geometry: Geometry) -> Var {
        match geometry {
            Geometry::Hyperbolic => {
                let x = diff::exp0(t, e);
                let h1 = hyp_linear(t, head.l1_weight, head.l1_bias, x);
                hyp_linear(t, head.l2_weight, head.l2_bias, h1)
            }
            Geometry::Euclidean => {
                let h1 = euclid_linear(t, head.l1_weight, head.l1_bias, e);
                let h1 = t.relu(h1);
                euclid_linear(t, head.l2_weight, head.l2_bias, h1)
            }
        }
    }

    /// Logit of the single-layer readout applied to `log_0(h)`.
    pub fn classify(t: &mut Tape<'_>, head: &HeadVars, h: Var, geometry: Geometry) -> Var {
        let z = match geometry {
            Geometry::Hyperbolic => diff::log0(t, h),
            Geometry::Euclidean => h,
        };
        let y = t.matvec(head.readout_weight, z);
        let y = t.add(y, head.readout_bias);
        t.sum(y)
    }
}

fn check_input(p: &HypEncoderParams, e_len: usize) -> Result<HeadDims, HypError> {
    let dims = p.dims()?;
    if e_len != dims.input {
        return Err(HypError::DimMismatch(format!("input has {e_len} entries, head expects {}", dims.input)));
    }
    Ok(dims)
}

pub fn mobius_matvec(m: &Tensor, x: &BallPoint) -> Result<BallPoint, HypError> {
    match m.shape() {
        [_, n] if *n == x.dim() => {}
        s => return Err(HypError::DimMismatch(format!("matrix {s:?} against point of dim {}", x.dim()))),
    }
    let mut t = Tape::new();
    let mv = t.constant_ref(m);
    let xv = t.constant(Tensor::vector(x.coords().to_vec()));
    let y = tape_ops::mobius_matvec(&mut t, mv, xv);
    Ok(BallPoint::new(t.value(y).data().to_vec())?)
}

pub fn hyp_linear(p: &HypLinearParams, x: &BallPoint) -> Result<BallPoint, HypError> {
    let (_, n) = p.validate()?;
    if n != x.dim() {
        return Err(HypError::DimMismatch(format!("layer expects {n}, point has {}", x.dim())));
    }
    let mut t = Tape::new();
    let w = t.constant_ref(&p.weight);
    let b = t.constant(Tensor::vector(p.bias.coords().to_vec()));
    let xv = t.constant(Tensor::vector(x.coords().to_vec()));
    let y = tape_ops::hyp_linear(&mut t, w, b, xv);
    Ok(BallPoint::new(t.value(y).data().to_vec())?)
}

fn head_tape<'p>(t: &mut Tape<'p>, store: &'p ParamStore) -> HeadVars {
    HeadVars::from_bound(&t.bind(store))
}

pub fn hyp_encode(p: &HypEncoderParams, e: &Tensor) -> Result<BallPoint, HypError> {
    check_input(p, e.len())?;
    let mut store = ParamStore::new();
    p.to_store(&mut store);
    let mut t = Tape::new();
    let head = head_tape(&mut t, &store);
    let ev = t.constant(Tensor::vector(e.data().to_vec()));
    let h = tape_ops::hyp_encode(&mut t, &head, ev, Geometry::Hyperbolic);
    Ok(BallPoint::new(t.value(h).data().to_vec())?)
}

/// Readout logit for a ball point; the class probability is `sigmoid(logit)`.
pub fn classify(p: &HypEncoderParams, h: &BallPoint) -> Result<f64, HypError> {
    let dims = p.dims()?;
    if h.dim() != dims.output {
        return Err(HypError::DimMismatch(format!("point has {} entries, readout expects {}", h.dim(), dims.output)));
    }
    let z = crate::poincare::log0(h);
    let w = p.readout_weight.data();
    Ok(w.iter().zip(z.coords()).map(|(a, b)| a * b).sum::<f64>() + p.readout_bias)
}

fn normal_matrix(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    Tensor::from_parts(vec![rows, cols], (0..rows * cols).map(|_| dist.sample(rng)).collect())
}

/// Kaiming-normal matrix, `std = sqrt(2 / fan_in)`.
pub(crate) fn kaiming(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    normal_matrix(rows, cols, (2.0 / cols as f64).sqrt(), rng)
}

/// Hyperbolic layers draw weights from `N(0, (2 n m)^(-1/2))` with zero
/// biases; the readout uses Kaiming fan-in scaling.
pub fn init_params(dims: HeadDims, seed: u64) -> HypEncoderParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layer = |m: usize, n: usize, rng: &mut ChaCha8Rng| HypLinearParams {
        weight: normal_matrix(m, n, (2.0 * n as f64 * m as f64).powf(-0.5), rng),
        bias: BallPoint::origin(m),
    };
    let layer1 = layer(dims.hidden, dims.input, &mut rng);
    let layer2 = layer(dims.output, dims.hidden, &mut rng);
    HypEncoderParams { layer1, layer2, readout_weight: kaiming(1, dims.output, &mut rng), readout_bias: 0.0 }
}

/// Euclidean-MLP initialisation used by the Euclidean ablation: Kaiming on every layer.
pub fn init_euclidean_params(dims: HeadDims, seed: u64) -> HypEncoderParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layer1 =
        HypLinearParams { weight: kaiming(dims.hidden, dims.input, &mut rng), bias: BallPoint::origin(dims.hidden) };
    let layer2 =
        HypLinearParams { weight: kaiming(dims.output, dims.hidden, &mut rng), bias: BallPoint::origin(dims.output) };
    HypEncoderParams { layer1, layer2, readout_weight: kaiming(1, dims.output, &mut rng), readout_bias: 0.0 }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{fd, grad_of};
    use crate::poincare::{distance, exp0, log0, mobius_add, TangentVector};
    use rand::Rng;

    fn small_dims() -> HeadDims {
        HeadDims { input: 6, hidden: 5, output: 4 }
    }

    fn random_params(dims: HeadDims, seed: u64) -> HypEncoderParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = init_params(dims, seed);
        p.layer1.weight = normal_matrix(dims.hidden, dims.input, 0.5, &mut rng);
        p.layer2.weight = normal_matrix(dims.output, dims.hidden, 0.5, &mut rng);
        let b1: Vec<f64> = (0..dims.hidden).map(|_| rng.random_range(-0.3..0.3)).collect();
        let b2: Vec<f64> = (0..dims.output).map(|_| rng.random_range(-0.3..0.3)).collect();
        p.layer1.bias = BallPoint::new(b1).unwrap();
        p.layer2.bias = BallPoint::new(b2).unwrap();
        p
    }

    #[test]
    fn identity_matrix_is_identity_map() {
        let x = BallPoint::new(vec![0.3, -0.2, 0.5]).unwrap();
        let y = mobius_matvec(&Tensor::identity(3), &x).unwrap();
        for (a, b) in x.coords().iter().zip(y.coords()) {
            assert!((a - b).abs() < 1e-14);
        }
        assert_eq!(mobius_matvec(&Tensor::identity(3), &BallPoint::origin(3)).unwrap(), BallPoint::origin(3));
    }

    #[test]
    fn scaled_identity_matches_scalar_closed_form() {
        let m = Tensor::identity(2).scale(2.0);
        let y = mobius_matvec(&m, &BallPoint::new(vec![0.3, 0.0]).unwrap()).unwrap();
        let expect = (2.0 * 0.3f64.atanh()).tanh();
        assert!((y.coords()[0] - expect).abs() < 1e-14);
        assert!((expect - 0.6 / 1.09).abs() < 1e-15);
        assert_eq!(y.coords()[1], 0.0);
    }

    #[test]
    fn mobius_matvec_rejects_bad_shapes() {
        let r = mobius_matvec(&Tensor::identity(3), &BallPoint::origin(2));
        assert!(matches!(r, Err(HypError::DimMismatch(_))));
    }

    #[test]
    fn hyp_linear_special_cases() {
        let x = BallPoint::new(vec![0.1, 0.4]).unwrap();
        let id = HypLinearParams { weight: Tensor::identity(2), bias: BallPoint::origin(2) };
        let y = hyp_linear(&id, &x).unwrap();
        assert!(y.coords().iter().zip(x.coords()).all(|(a, b)| (a - b).abs() < 1e-14));
        let b = BallPoint::new(vec![-0.3, 0.2]).unwrap();
        let with_bias = HypLinearParams { weight: Tensor::identity(2), bias: b.clone() };
        let y = hyp_linear(&with_bias, &BallPoint::origin(2)).unwrap();
        assert!(y.coords().iter().zip(b.coords()).all(|(a, c)| (a - c).abs() < 1e-14));
        // The translation reduces to Möbius addition of the bias.
        let y = hyp_linear(&with_bias, &x).unwrap();
        let direct = mobius_add(&x, &b);
        assert!(y.coords().iter().zip(direct.coords()).all(|(a, c)| (a - c).abs() < 1e-12));
    }

    #[test]
    fn hyp_linear_output_stays_in_ball() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let w = normal_matrix(3, 3, 3.0, &mut rng);
            let b: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let p = HypLinearParams { weight: w, bias: BallPoint::new(b).unwrap() };
            let y = hyp_linear(&p, &BallPoint::new(x).unwrap()).unwrap();
            assert!(y.norm() < 1.0 - 1e-5 + 1e-15);
        }
    }

    #[test]
    fn encode_zero_input_with_zero_biases_is_origin() {
        let p = init_params(small_dims(), 3);
        assert_eq!(hyp_encode(&p, &Tensor::zeros(&[6])).unwrap(), BallPoint::origin(4));
        assert!(matches!(hyp_encode(&p, &Tensor::zeros(&[5])), Err(HypError::DimMismatch(_))));
    }

    #[test]
    fn encode_stays_in_ball_and_is_deterministic() {
        let p = random_params(HeadDims { input: 16, hidden: 12, output: 8 }, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..1000 {
            let e: Vec<f64> = (0..16).map(|_| rng.random_range(-10.0..10.0)).collect();
            let e = Tensor::vector(e);
            let h = hyp_encode(&p, &e).unwrap();
            assert!(h.norm() <= MAX_NORM + 1e-15);
            assert_eq!(h, hyp_encode(&p, &e).unwrap());
        }
    }

    #[test]
    fn classify_readout() {
        let mut p = init_params(small_dims(), 4);
        p.readout_weight = Tensor::zeros(&[1, 4]);
        let h = BallPoint::new(vec![0.1, 0.2, 0.3, 0.0]).unwrap();
        assert_eq!(classify(&p, &h).unwrap(), 0.0);
        assert_eq!(crate::numcore::sigmoid(classify(&p, &h).unwrap()), 0.5);
        p.readout_weight = Tensor::matrix(1, 4, vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        p.readout_bias = 0.25;
        let z = log0(&h);
        let z2 = TangentVector::new(z.coords().iter().map(|c| 2.0 * c).collect()).unwrap();
        let h2 = exp0(&z2);
        // Linear in the log-map coordinates.
        let a = classify(&p, &h).unwrap() - 0.25;
        let b = classify(&p, &h2).unwrap() - 0.25;
        assert!((b - 2.0 * a).abs() < 1e-10);
    }

    #[test]
    fn init_is_deterministic_with_expected_scale() {
        let dims = HeadDims::default();
        let a = init_params(dims, 42);
        assert_eq!(a, init_params(dims, 42));
        assert!(a.layer1.bias.coords().iter().all(|&b| b == 0.0));
        assert!(a.layer2.bias.coords().iter().all(|&b| b == 0.0));
        assert_eq!(a.readout_bias, 0.0);
        let w = a.layer1.weight.data();
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let std = (w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / w.len() as f64).sqrt();
        let target = (2.0 * 256.0 * 256.0f64).powf(-0.5);
        assert!((std - target).abs() / target < 0.1, "std {std} target {target}");
    }

    #[test]
    fn distance_through_encoder_passes_finite_differences() {
        let dims = small_dims();
        let p = random_params(dims, 5);
        let mut store = ParamStore::new();
        p.to_store(&mut store);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let e: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let target = vec![0.2, -0.1, 0.3, 0.05];
        let f = |s: &ParamStore| {
            let mut t = Tape::new();
            let head = head_tape(&mut t, s);
            let ev = t.constant(Tensor::vector(e.clone()));
            let y = t.constant(Tensor::vector(target.clone()));
            let h = tape_ops::hyp_encode(&mut t, &head, ev, Geometry::Hyperbolic);
            let d = diff::distance(&mut t, h, y);
            let logit = tape_ops::classify(&mut t, &head, h, Geometry::Hyperbolic);
            let l = t.bce_logits(logit, 1.0);
            let out = t.add(d, l);
            t.scalar(out)
        };
        let bundle = grad_of::<HypError>(&store, |t, b| {
            let head = HeadVars::from_bound(b);
            let ev = t.constant(Tensor::vector(e.clone()));
            let y = t.constant(Tensor::vector(target.clone()));
            let h = tape_ops::hyp_encode(t, &head, ev, Geometry::Hyperbolic);
            let d = diff::distance(t, h, y);
            let logit = tape_ops::classify(t, &head, h, Geometry::Hyperbolic);
            let l = t.bce_logits(logit, 1.0);
            Ok(t.add(d, l))
        })
        .unwrap();
        bundle.check_shapes(&store).unwrap();
        for (name, g) in &bundle.grads {
            for i in 0..g.len() {
                let mut plus = store.clone();
                plus.get_mut(name).unwrap().data_mut()[i] += fd::STEP;
                let mut minus = store.clone();
                minus.get_mut(name).unwrap().data_mut()[i] -= fd::STEP;
                let numeric = (f(&plus) - f(&minus)) / (2.0 * fd::STEP);
                let e = fd::rel_err(g.data()[i], numeric);
                assert!(e < 1e-4, "{name}[{i}]: {} vs {numeric}", g.data()[i]);
            }
        }
        // Sanity: the tape distance equals the plain distance.
        let h = hyp_encode(&p, &Tensor::vector(e.clone())).unwrap();
        let d = distance(&h, &BallPoint::new(target.clone()).unwrap());
        assert!(d.is_finite());
    }
}
