//! Dense row-major `f64` tensors and the handful of kernels the model needs.

use serde::{Deserialize, Serialize};

use super::TensorError;

/// Lower/upper clamp for `artanh` arguments.
pub const ARTANH_CLAMP: f64 = 1.0 - 1e-15;
/// Inputs further than this outside a function's domain are rejected instead of clamped.
pub const DOMAIN_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Tanh,
    Artanh,
    Acosh,
    Relu,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
    L2Norm,
}

/// `artanh` with the argument clamped into the open interval.
pub fn artanh_clamped(x: f64) -> f64 {
    x.clamp(-ARTANH_CLAMP, ARTANH_CLAMP).atanh()
}

/// `acosh` with the argument clamped to `[1, inf)`.
pub fn acosh_clamped(x: f64) -> f64 {
    x.max(1.0).acosh()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl UnaryOp {
    fn apply(self, x: f64) -> Result<f64, TensorError> {
        Ok(match self {
            UnaryOp::Tanh => x.tanh(),
            UnaryOp::Artanh => {
                if x.abs() > 1.0 + DOMAIN_TOLERANCE {
                    return Err(TensorError::Domain { op: "artanh", value: x });
                }
                artanh_clamped(x)
            }
            UnaryOp::Acosh => {
                if x < 1.0 - DOMAIN_TOLERANCE {
                    return Err(TensorError::Domain { op: "acosh", value: x });
                }
                acosh_clamped(x)
            }
            UnaryOp::Relu => x.max(0.0),
            UnaryOp::Sigmoid => sigmoid(x),
        })
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::ShapeMismatch(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        let t = Tensor { shape, data };
        t.check_finite()?;
        Ok(t)
    }

    /// Builds without validation; callers guarantee `product(shape) == data.len()`.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(x: f64) -> Self {
        Tensor { shape: vec![], data: vec![x] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Value of a rank-0 (or single-element) tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self) -> Result<(), TensorError> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(TensorError::NonFinite { index: i }),
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor, TensorError> {
        if shape.iter().product::<usize>() != self.len() {
            return Err(TensorError::ShapeMismatch(format!("cannot reshape {:?} into {shape:?}", self.shape)));
        }
        Ok(Tensor { shape: shape.to_vec(), data: self.data.clone() })
    }

    fn dims2(&self) -> Result<(usize, usize), TensorError> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(TensorError::ShapeMismatch(format!("expected a matrix, got {:?}", self.shape))),
        }
    }

    /// Matrix product. A rank-1 right operand is treated as a column vector and
    /// the result is rank-1.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        let (m, k) = self.dims2()?;
        let (k2, n, vector_rhs) = match other.shape[..] {
            [k2] => (k2, 1, true),
            [k2, n] => (k2, n, false),
            _ => {
                return Err(TensorError::ShapeMismatch(format!(
                    "matmul rhs must be rank 1 or 2, got {:?}",
                    other.shape
                )))
            }
        };
        if k != k2 {
            return Err(TensorError::ShapeMismatch(format!(
                "matmul inner dimensions {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let mut out = vec![0.0; m * n];
        if n == 1 {
            for (o, row) in out.iter_mut().zip(self.data.chunks_exact(k.max(1))) {
                *o = dot4(row, &other.data);
            }
        } else {
            matmul_into(&self.data, &other.data, &mut out, m, k, n);
        }
        let shape = if vector_rhs { vec![m] } else { vec![m, n] };
        Ok(Tensor { shape, data: out })
    }

    pub fn transpose(&self) -> Result<Tensor, TensorError> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor { shape: vec![c, r], data: out })
    }

    pub fn unary(&self, op: UnaryOp) -> Result<Tensor, TensorError> {
        let data = self.data.iter().map(|&x| op.apply(x)).collect::<Result<Vec<_>, _>>()?;
        let t = Tensor { shape: self.shape.clone(), data };
        t.check_finite()?;
        Ok(t)
    }

    pub fn binary(&self, op: BinaryOp, other: &Tensor) -> Result<Tensor, TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch(format!("elementwise {:?} vs {:?}", self.shape, other.shape)));
        }
        let f = match op {
            BinaryOp::Add => |a: f64, b: f64| a + b,
            BinaryOp::Sub => |a: f64, b: f64| a - b,
            BinaryOp::Mul => |a: f64, b: f64| a * b,
        };
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        let t = Tensor { shape: self.shape.clone(), data };
        t.check_finite()?;
        Ok(t)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|x| x * s)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn add_scaled(&mut self, other: &Tensor, s: f64) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn sum_all(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Reduction along `axis`; the axis is removed from the result shape.
    pub fn reduce(&self, op: ReduceOp, axis: usize) -> Result<Tensor, TensorError> {
        if axis >= self.shape.len() {
            return Err(TensorError::InvalidAxis { axis, rank: self.shape.len() });
        }
        let len = self.shape[axis];
        if len == 0 && matches!(op, ReduceOp::Max | ReduceOp::Mean) {
            return Err(TensorError::EmptyReduction);
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let lane = (0..len).map(|a| self.data[(o * len + a) * inner + i]);
                let v = match op {
                    ReduceOp::Sum => lane.sum(),
                    ReduceOp::Mean => lane.sum::<f64>() / len as f64,
                    ReduceOp::Max => lane.fold(f64::NEG_INFINITY, f64::max),
                    ReduceOp::L2Norm => lane.map(|x| x * x).sum::<f64>().sqrt(),
                };
                out.push(v);
            }
        }
        let mut shape = self.shape.clone();
        shape.remove(axis);
        Ok(Tensor { shape, data: out })
    }

    /// Bilinear upsampling of an `H x W` map with align-corners semantics.
    pub fn upsample_bilinear(&self, factor: usize) -> Result<Tensor, TensorError> {
        if factor < 1 {
            return Err(TensorError::InvalidArgument("upsample factor must be >= 1".into()));
        }
        let (h, w) = self.dims2()?;
        if h == 0 || w == 0 {
            return Err(TensorError::InvalidArgument("upsample needs a non-empty map".into()));
        }
        let rows = interpolation_matrix(h, h * factor);
        let cols = interpolation_matrix(w, w * factor);
        let tmp = rows.matmul(self)?;
        tmp.matmul(&cols.transpose()?)
    }
}

/// Dot product with four partial sums.
pub(crate) fn dot4(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `out[m x n] += a[m x k] * b[k x n]`, all row-major.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// Linear interpolation weights mapping `src` samples onto `dst` samples with
/// aligned end points, as a `dst x src` matrix.
pub(crate) fn interpolation_matrix(src: usize, dst: usize) -> Tensor {
    let mut m = Tensor::zeros(&[dst, src]);
    for i in 0..dst {
        let pos = if dst > 1 { i as f64 * (src - 1) as f64 / (dst - 1) as f64 } else { 0.0 };
        let lo = (pos.floor() as usize).min(src - 1);
        let hi = (lo + 1).min(src - 1);
        let frac = pos - lo as f64;
        m.data[i * src + lo] += 1.0 - frac;
        if hi != lo {
            m.data[i * src + hi] += frac;
        } else {
            m.data[i * src + lo] += frac;
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
    }

    #[test]
    fn identity_matmul_returns_input() {
        let x = Tensor::new(vec![2, 1], vec![0.3, -4.0]).unwrap();
        assert_eq!(Tensor::identity(2).matmul(&x).unwrap(), x);
    }

    #[test]
    fn small_matmul_by_hand() {
        let a = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random(&[8, 8], &mut rng);
        let b = random(&[8, 8], &mut rng);
        let c = a.matmul(&b).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                let mut dot = 0.0;
                for p in 0..8 {
                    dot += a.data()[i * 8 + p] * b.data()[p * 8 + j];
                }
                assert!(rel_err(c.data()[i * 8 + j], dot) < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_shape_mismatch_is_error() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(a.matmul(&b), Err(TensorError::ShapeMismatch(_))));
    }

    #[test]
    fn matmul_is_associative() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let (m, k, n, p) =
                (rng.random_range(1..7), rng.random_range(1..7), rng.random_range(1..7), rng.random_range(1..7));
            let a = random(&[m, k], &mut rng);
            let b = random(&[k, n], &mut rng);
            let c = random(&[n, p], &mut rng);
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            let scale = left.norm().max(1e-12);
            for (x, y) in left.data().iter().zip(right.data()) {
                assert!((x - y).abs() / scale < 1e-10);
            }
        }
    }

    #[test]
    fn elementwise_values() {
        let t = Tensor::vector(vec![0.0]);
        assert_eq!(t.unary(UnaryOp::Tanh).unwrap().item(), 0.0);
        let r = Tensor::vector(vec![0.7_f64.tanh()]).unwrap_artanh();
        assert!((r - 0.7).abs() < 1e-12);
        assert_eq!(Tensor::vector(vec![1.0]).unary(UnaryOp::Acosh).unwrap().item(), 0.0);
        assert_eq!(Tensor::vector(vec![-2.0, 3.0]).unary(UnaryOp::Relu).unwrap().data(), &[0.0, 3.0]);
        assert_eq!(Tensor::vector(vec![0.0]).unary(UnaryOp::Sigmoid).unwrap().item(), 0.5);
        let a = Tensor::vector(vec![1.0, 2.0]);
        let b = Tensor::vector(vec![3.0, 5.0]);
        assert_eq!(a.binary(BinaryOp::Add, &b).unwrap().data(), &[4.0, 7.0]);
        assert_eq!(a.binary(BinaryOp::Sub, &b).unwrap().data(), &[-2.0, -3.0]);
        assert_eq!(a.binary(BinaryOp::Mul, &b).unwrap().data(), &[3.0, 10.0]);
    }

    impl Tensor {
        fn unwrap_artanh(&self) -> f64 {
            self.unary(UnaryOp::Artanh).unwrap().item()
        }
    }

    #[test]
    fn domain_clamping_and_violations() {
        // At the boundary the clamp keeps the result finite.
        let edge = Tensor::vector(vec![1.0, -1.0]).unary(UnaryOp::Artanh).unwrap();
        assert!(edge.is_finite());
        assert!(Tensor::vector(vec![1.5]).unary(UnaryOp::Artanh).is_err());
        assert_eq!(Tensor::vector(vec![1.0 - 1e-12]).unary(UnaryOp::Acosh).unwrap().item(), 0.0);
        assert!(Tensor::vector(vec![0.5]).unary(UnaryOp::Acosh).is_err());
    }

    #[test]
    fn reductions() {
        let t = Tensor::vector(vec![3.0, 4.0]);
        assert_eq!(t.reduce(ReduceOp::L2Norm, 0).unwrap().item(), 5.0);
        assert_eq!(Tensor::vector(vec![1.0, 2.0, 3.0]).reduce(ReduceOp::Mean, 0).unwrap().item(), 2.0);
        let m = Tensor::matrix(2, 3, vec![1.0, 5.0, 2.0, 4.0, 0.0, 9.0]).unwrap();
        assert_eq!(m.reduce(ReduceOp::Max, 1).unwrap().data(), &[5.0, 9.0]);
        assert_eq!(m.reduce(ReduceOp::Sum, 0).unwrap().data(), &[5.0, 5.0, 11.0]);
        assert!(matches!(Tensor::zeros(&[0]).reduce(ReduceOp::Max, 0), Err(TensorError::EmptyReduction)));
        assert!(matches!(t.reduce(ReduceOp::Sum, 1), Err(TensorError::InvalidAxis { .. })));
    }

    #[test]
    fn upsample_identity_and_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = random(&[3, 4], &mut rng);
        assert_eq!(t.upsample_bilinear(1).unwrap(), t);
        let c = Tensor::filled(&[2, 3], 0.25).upsample_bilinear(4).unwrap();
        assert_eq!(c.shape(), &[8, 12]);
        assert!(c.data().iter().all(|v| (v - 0.25).abs() < 1e-15));
        assert!(t.upsample_bilinear(0).is_err());
    }

    #[test]
    fn upsample_matches_per_pixel_formula() {
        // Reference: for each output pixel, map back to source coordinates with
        // aligned corners and blend the four neighbours.
        fn reference(src: &[f64], h: usize, w: usize, f: usize) -> Vec<f64> {
            let (ho, wo) = (h * f, w * f);
            let mut out = Vec::new();
            for i in 0..ho {
                for j in 0..wo {
                    let y = if ho > 1 { i as f64 * (h - 1) as f64 / (ho - 1) as f64 } else { 0.0 };
                    let x = if wo > 1 { j as f64 * (w - 1) as f64 / (wo - 1) as f64 } else { 0.0 };
                    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
                    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
                    let (dy, dx) = (y - y0 as f64, x - x0 as f64);
                    let v = src[y0 * w + x0] * (1.0 - dy) * (1.0 - dx)
                        + src[y0 * w + x1] * (1.0 - dy) * dx
                        + src[y1 * w + x0] * dy * (1.0 - dx)
                        + src[y1 * w + x1] * dy * dx;
                    out.push(v);
                }
            }
            out
        }
        let t = Tensor::matrix(2, 2, vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let up = t.upsample_bilinear(2).unwrap();
        let expect = reference(t.data(), 2, 2, 2);
        for (a, b) in up.data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-14);
        }
        // Columns interpolate 0, 1/3, 2/3, 1 on every row.
        assert!((up.data()[1] - 1.0 / 3.0).abs() < 1e-14);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let r = random(&[5, 3], &mut rng);
        let up = r.upsample_bilinear(3).unwrap();
        for (a, b) in up.data().iter().zip(reference(r.data(), 5, 3, 3)) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn construction_rejects_bad_input() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![1], vec![f64::NAN]).is_err());
    }
}
