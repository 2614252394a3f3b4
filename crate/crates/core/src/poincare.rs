//! The Poincaré ball model with curvature fixed at `-1`.
//!
//! Plain functions operate on [`BallPoint`] / [`TangentVector`] values; the
//! [`diff`] submodule builds the same maps on a [`Tape`] for training. Every
//! ball-valued result is radially clamped to `1 - BALL_EPS`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numcore::{artanh_clamped, poincare_distance_raw};

/// Distance kept between any ball point and the unit sphere.
pub const BALL_EPS: f64 = 1e-5;
/// Largest admissible Euclidean norm of a ball point.
pub const MAX_NORM: f64 = 1.0 - BALL_EPS;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PoincareError {
    #[error("non-finite coordinate at index {0}")]
    NonFinite(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BallPoint(Vec<f64>);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TangentVector(Vec<f64>);

fn dot(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "dimension mismatch");
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn clamp_to_ball(mut v: Vec<f64>) -> Vec<f64> {
    let r = norm(&v);
    if r > MAX_NORM {
        let s = MAX_NORM / r;
        v.iter_mut().for_each(|x| *x *= s);
    }
    v
}

fn check_finite(v: &[f64]) -> Result<(), PoincareError> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(i) => Err(PoincareError::NonFinite(i)),
        None => Ok(()),
    }
}

/// Rescales `raw` onto the ball of radius `1 - BALL_EPS` if it lies outside.
pub fn project(raw: &[f64]) -> Result<BallPoint, PoincareError> {
    check_finite(raw)?;
    Ok(BallPoint(clamp_to_ball(raw.to_vec())))
}

impl BallPoint {
    pub fn new(raw: Vec<f64>) -> Result<Self, PoincareError> {
        check_finite(&raw)?;
        Ok(BallPoint(clamp_to_ball(raw)))
    }

    pub fn origin(dim: usize) -> Self {
        BallPoint(vec![0.0; dim])
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    /// Möbius negation `-x`.
    pub fn neg(&self) -> BallPoint {
        BallPoint(self.0.iter().map(|x| -x).collect())
    }
}

impl TangentVector {
    pub fn new(coords: Vec<f64>) -> Result<Self, PoincareError> {
        check_finite(&coords)?;
        Ok(TangentVector(coords))
    }

    pub fn zero(dim: usize) -> Self {
        TangentVector(vec![0.0; dim])
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }
}

/// `lambda_x = 2 / (1 - |x|^2)`.
pub fn conformal_factor(x: &BallPoint) -> f64 {
    2.0 / (1.0 - dot(&x.0, &x.0))
}

pub fn mobius_add(x: &BallPoint, y: &BallPoint) -> BallPoint {
    let xy = dot(&x.0, &y.0);
    let xx = dot(&x.0, &x.0);
    let yy = dot(&y.0, &y.0);
    let cx = 1.0 + 2.0 * xy + yy;
    let cy = 1.0 - xx;
    let den = 1.0 + 2.0 * xy + xx * yy;
    let v = x.0.iter().zip(&y.0).map(|(a, b)| (cx * a + cy * b) / den).collect();
    BallPoint(clamp_to_ball(v))
}

/// `exp_z(v) = z ⊕ tanh(lambda_z |v| / 2) v / |v|`, with `exp_z(0) = z`.
pub fn exp_map(z: &BallPoint, v: &TangentVector) -> BallPoint {
    let r = v.norm();
    if r == 0.0 {
        return z.clone();
    }
    let s = (conformal_factor(z) * r / 2.0).tanh() / r;
    let step = BallPoint(clamp_to_ball(v.0.iter().map(|c| c * s).collect()));
    mobius_add(z, &step)
}

/// `log_z(y) = (2 / lambda_z) artanh(|w|) w / |w|` with `w = (-z) ⊕ y`, and `log_z(z) = 0`.
pub fn log_map(z: &BallPoint, y: &BallPoint) -> TangentVector {
    let w = mobius_add(&z.neg(), y);
    let r = w.norm();
    if r == 0.0 {
        return TangentVector::zero(z.dim());
    }
    let s = (2.0 / conformal_factor(z)) * artanh_clamped(r) / r;
    TangentVector(w.0.iter().map(|c| c * s).collect())
}

pub fn exp0(v: &TangentVector) -> BallPoint {
    exp_map(&BallPoint::origin(v.0.len()), v)
}

pub fn log0(y: &BallPoint) -> TangentVector {
    log_map(&BallPoint::origin(y.dim()), y)
}

/// `acosh(1 + 2 |x - y|^2 / ((1 - |x|^2)(1 - |y|^2)))`.
pub fn distance(x: &BallPoint, y: &BallPoint) -> f64 {
    assert_eq!(x.dim(), y.dim(), "dimension mismatch");
    poincare_distance_raw(&x.0, &y.0)
}

pub mod diff {
    //! Tape versions of the ball maps.

    use super::MAX_NORM;
    use crate::numcore::{Tape, Tensor, Var};

    pub fn mobius_add(t: &mut Tape<'_>, x: Var, y: Var) -> Var {
        let xy = t.dot(x, y);
        let xx = t.sum_sq(x);
        let yy = t.sum_sq(y);
        // (1 + 2<x,y> + |y|^2) x + (1 - |x|^2) y
        let two_xy = t.affine(xy, 2.0, 1.0);
        let cx = t.add(two_xy, yy);
        let cy = t.affine(xx, -1.0, 1.0);
        let ax = t.scale(x, cx);
        let by = t.scale(y, cy);
        let num = t.add(ax, by);
        // 1 + 2<x,y> + |x|^2 |y|^2
        let xxyy = t.mul(xx, yy);
        let den = t.add(two_xy, xxyy);
        let inv = t.recip(den);
        let out = t.scale(num, inv);
        t.project(out, MAX_NORM)
    }

    pub fn exp0(t: &mut Tape<'_>, v: Var) -> Var {
        let one = t.constant(Tensor::scalar(1.0));
        let y = t.tanh_dir(v, one);
        t.project(y, MAX_NORM)
    }

    pub fn log0(t: &mut Tape<'_>, y: Var) -> Var {
        let s = t.artanh_ratio(y);
        t.scale(y, s)
    }

    /// `1 / (1 - |z|^2)`, i.e. half the conformal factor.
    fn half_conformal(t: &mut Tape<'_>, z: Var) -> Var {
        let zz = t.sum_sq(z);
        let den = t.affine(zz, -1.0, 1.0);
        t.recip(den)
    }

    pub fn exp_map(t: &mut Tape<'_>, z: Var, v: Var) -> Var {
        let k = half_conformal(t, z);
        let step = t.tanh_dir(v, k);
        let step = t.project(step, MAX_NORM);
        mobius_add(t, z, step)
    }

    pub fn log_map(t: &mut Tape<'_>, z: Var, y: Var) -> Var {
        let nz = t.neg(z);
        let w = mobius_add(t, nz, y);
        let zz = t.sum_sq(z);
        let two_over_lambda = t.affine(zz, -1.0, 1.0);
        let s = t.artanh_ratio(w);
        let coef = t.mul(two_over_lambda, s);
        t.scale(w, coef)
    }

    pub fn distance(t: &mut Tape<'_>, x: Var, y: Var) -> Var {
        t.poincare_dist(x, y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{fd, Tape, Tensor};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn p(v: &[f64]) -> BallPoint {
        BallPoint::new(v.to_vec()).unwrap()
    }

    fn random_point(d: usize, max_r: f64, rng: &mut impl Rng) -> BallPoint {
        let dir: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = norm(&dir).max(1e-12);
        let r = rng.random_range(0.0..max_r);
        BallPoint::new(dir.iter().map(|x| x * r / n).collect()).unwrap()
    }

    #[test]
    fn conformal_factor_values() {
        assert_eq!(conformal_factor(&p(&[0.0, 0.0])), 2.0);
        assert!((conformal_factor(&p(&[0.5, 0.0])) - 8.0 / 3.0).abs() < 1e-15);
        let edge = conformal_factor(&p(&[MAX_NORM, 0.0]));
        assert!(edge.is_finite() && edge > 1e4);
    }

    #[test]
    fn collinear_addition_matches_scalar_gyro_sum() {
        let s = mobius_add(&p(&[0.3, 0.0]), &p(&[0.4, 0.0]));
        // (a + b) / (1 + ab)
        let expect = (0.3 + 0.4) / (1.0 + 0.3 * 0.4);
        assert!((s.coords()[0] - expect).abs() < 1e-15);
        assert!((expect - 0.625).abs() < 1e-15);
        assert_eq!(s.coords()[1], 0.0);
    }

    #[test]
    fn identity_and_inverse() {
        let x = p(&[0.2, -0.5, 0.1]);
        assert_eq!(mobius_add(&BallPoint::origin(3), &x), x);
        assert_eq!(mobius_add(&x, &BallPoint::origin(3)), x);
        let z = mobius_add(&x, &x.neg());
        assert!(z.norm() < 1e-12);
    }

    #[test]
    fn exp_log_known_values() {
        assert_eq!(exp0(&TangentVector::zero(2)), BallPoint::origin(2));
        let e = exp0(&TangentVector::new(vec![0.5, 0.0]).unwrap());
        assert!((e.coords()[0] - 0.5f64.tanh()).abs() < 1e-15);
        assert!((e.coords()[0] - 0.462117).abs() < 1e-6);
        let l = log0(&p(&[0.5f64.tanh(), 0.0]));
        assert!((l.coords()[0] - 0.5).abs() < 1e-12);
        let x = p(&[0.1, 0.3]);
        assert_eq!(log_map(&x, &x), TangentVector::zero(2));
        assert_eq!(exp_map(&x, &TangentVector::zero(2)), x);
    }

    #[test]
    fn distance_values() {
        let x = p(&[0.3, 0.1]);
        assert_eq!(distance(&x, &x), 0.0);
        let d = distance(&BallPoint::origin(2), &p(&[0.5, 0.0]));
        assert!((d - 2.0 * 0.5f64.atanh()).abs() < 1e-12);
        assert!((d - 1.098612).abs() < 1e-6);
    }

    #[test]
    fn projection_contract() {
        let a = project(&[0.3, 0.0]).unwrap();
        assert_eq!(a.coords(), &[0.3, 0.0]);
        let b = project(&[2.0, 0.0]).unwrap();
        assert!((b.norm() - MAX_NORM).abs() < 1e-15);
        assert_eq!(project(b.coords()).unwrap(), b);
        assert!(project(&[f64::NAN]).is_err());
    }

    #[test]
    fn mobius_addition_is_not_commutative() {
        let x = p(&[0.4, 0.1]);
        let y = p(&[-0.2, 0.5]);
        let xy = mobius_add(&x, &y);
        let yx = mobius_add(&y, &x);
        assert!((xy.norm() - yx.norm()).abs() < 1e-12);
        assert!(xy.coords().iter().zip(yx.coords()).any(|(a, b)| (a - b).abs() > 1e-3));
    }

    #[test]
    fn tape_maps_agree_with_plain_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for d in [2, 8, 64] {
            let x = random_point(d, 0.9, &mut rng);
            let y = random_point(d, 0.9, &mut rng);
            let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut t = Tape::new();
            let xv = t.constant(Tensor::vector(x.coords().to_vec()));
            let yv = t.constant(Tensor::vector(y.coords().to_vec()));
            let vv = t.constant(Tensor::vector(v.clone()));
            let sum = diff::mobius_add(&mut t, xv, yv);
            let ex = diff::exp_map(&mut t, xv, vv);
            let lg = diff::log_map(&mut t, xv, yv);
            let e0 = diff::exp0(&mut t, vv);
            let l0 = diff::log0(&mut t, yv);
            let dist = diff::distance(&mut t, xv, yv);
            let tv = TangentVector::new(v).unwrap();
            let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(p, q)| (p - q).abs() < 1e-12);
            assert!(close(t.value(sum).data(), mobius_add(&x, &y).coords()));
            assert!(close(t.value(ex).data(), exp_map(&x, &tv).coords()));
            assert!(close(t.value(lg).data(), log_map(&x, &y).coords()));
            assert!(close(t.value(e0).data(), exp0(&tv).coords()));
            assert!(close(t.value(l0).data(), log0(&y).coords()));
            assert!((t.scalar(dist) - distance(&x, &y)).abs() < 1e-12);
        }
    }

    #[test]
    fn tape_maps_pass_finite_difference_checks() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let x = random_point(4, 0.8, &mut rng);
            let y = random_point(4, 0.8, &mut rng);
            let yc = y.coords().to_vec();
            fd::check_vector(
                x.coords(),
                |t, xv| {
                    let yv = t.constant(Tensor::vector(yc.clone()));
                    diff::distance(t, xv, yv)
                },
                1e-4,
            );
            fd::check_vector(
                x.coords(),
                |t, xv| {
                    let yv = t.constant(Tensor::vector(yc.clone()));
                    let s = diff::mobius_add(t, xv, yv);
                    let l = diff::log_map(t, yv, s);
                    let e = diff::exp_map(t, xv, l);
                    let w = diff::log0(t, e);
                    let w = diff::exp0(t, w);
                    t.sum_sq(w)
                },
                1e-4,
            );
        }
    }

    proptest! {
        #[test]
        fn outputs_stay_in_ball(a in proptest::collection::vec(-3.0f64..3.0, 3), b in proptest::collection::vec(-3.0f64..3.0, 3)) {
            let x = BallPoint::new(a).unwrap();
            let y = BallPoint::new(b.clone()).unwrap();
            prop_assert!(x.norm() <= MAX_NORM + 1e-15);
            prop_assert!(mobius_add(&x, &y).norm() <= MAX_NORM + 1e-15);
            prop_assert!(exp_map(&x, &TangentVector::new(b).unwrap()).norm() <= MAX_NORM + 1e-15);
            prop_assert!(distance(&x, &y) >= 0.0);
        }
    }
}
