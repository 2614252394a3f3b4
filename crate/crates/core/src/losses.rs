//! Supervised, triplet and norm-regularisation losses and their weighted sum.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hypnet::Geometry;
use crate::numcore::{Tape, Var};
use crate::poincare::{distance, BallPoint, MAX_NORM};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("loss weight `{0}` must be finite and non-negative")]
    InvalidWeight(&'static str),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Triplet coefficient.
    pub alpha: f64,
    /// Norm-regularisation coefficient.
    pub beta: f64,
    /// Triplet margin, in distance units.
    pub lambda_margin: f64,
    /// Norm margin, in ball-norm units.
    pub gamma_margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 0.05, beta: 1.0, lambda_margin: 10.0, gamma_margin: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("lambda_margin", self.lambda_margin),
            ("gamma_margin", self.gamma_margin),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(LossError::InvalidWeight(name));
            }
        }
        Ok(())
    }

    /// A chain of `depth` norm margins cannot fit inside the ball when
    /// `gamma * depth >= 1 - eps`; returns a warning message in that case.
    pub fn feasibility_warning(&self, max_depth: usize) -> Option<String> {
        let span = self.gamma_margin * max_depth as f64;
        (span >= MAX_NORM).then(|| {
            format!(
                "norm margin {} over hierarchy depth {max_depth} spans {span:.3}, beyond the ball radius {MAX_NORM}",
                self.gamma_margin
            )
        })
    }
}

/// Binary cross-entropy on a logit, in the overflow-free form
/// `max(z, 0) - z y + ln(1 + e^{-|z|})`.
pub fn bce_loss(logit: f64, label: bool) -> f64 {
    let y = if label { 1.0 } else { 0.0 };
    logit.max(0.0) - logit * y + (-logit.abs()).exp().ln_1p()
}

pub fn triplet_hinge(d_ap: f64, d_an: f64, lambda: f64) -> f64 {
    (d_ap - d_an + lambda).max(0.0)
}

/// `max(0, d(a, p) - d(a, n) + lambda)` with the Poincaré distance.
pub fn triplet_loss(a: &BallPoint, p: &BallPoint, n: &BallPoint, lambda: f64) -> f64 {
    triplet_hinge(distance(a, p), distance(a, n), lambda)
}

/// Zero exactly when the norms grow by at least `gamma` from `a` to `b` and
/// from `b` to `c` (ranked least to most specific).
pub fn norm_reg_hinge(na: f64, nb: f64, nc: f64, gamma: f64) -> f64 {
    (na + gamma - nb).max(0.0) + (nb + gamma - nc).max(0.0)
}

pub fn norm_reg_loss(a: &BallPoint, b: &BallPoint, c: &BallPoint, gamma: f64) -> f64 {
    norm_reg_hinge(a.norm(), b.norm(), c.norm(), gamma)
}

pub fn total_loss(sup: f64, trip: f64, reg: f64, w: &LossWeights) -> f64 {
    sup + w.alpha * trip + w.beta * reg
}

/// Triplets of embeddings whose source samples carry pairwise-distinct predicates.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TripletBatch {
    /// `(anchor, positive, negative)`.
    pub triplets: Vec<[BallPoint; 3]>,
    /// `(least, middle, most)` specific.
    pub ranked: Vec<[BallPoint; 3]>,
}

impl TripletBatch {
    /// Mean triplet and mean norm losses; zero for an empty batch.
    pub fn mean_losses(&self, w: &LossWeights) -> (f64, f64) {
        let mean = |v: Vec<f64>| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
        let trip = self.triplets.iter().map(|[a, p, n]| triplet_loss(a, p, n, w.lambda_margin)).collect();
        let reg = self.ranked.iter().map(|[a, b, c]| norm_reg_loss(a, b, c, w.gamma_margin)).collect();
        (mean(trip), mean(reg))
    }
}

pub mod tape_ops {
    use super::*;

    pub fn dist(t: &mut Tape<'_>, x: Var, y: Var, geometry: Geometry) -> Var {
        match geometry {
            Geometry::Hyperbolic => t.poincare_dist(x, y),
            Geometry::Euclidean => t.euclid_dist(x, y),
        }
    }

    pub fn triplet(t: &mut Tape<'_>, a: Var, p: Var, n: Var, lambda: f64, geometry: Geometry) -> Var {
        let dap = dist(t, a, p, geometry);
        let dan = dist(t, a, n, geometry);
        let diff = t.sub(dap, dan);
        let shifted = t.affine(diff, 1.0, lambda);
        t.relu(shifted)
    }

    pub fn norm_reg(t: &mut Tape<'_>, a: Var, b: Var, c: Var, gamma: f64) -> Var {
        let na = t.norm(a);
        let nb = t.norm(b);
        let nc = t.norm(c);
        let ab = t.sub(na, nb);
        let ab = t.affine(ab, 1.0, gamma);
        let ab = t.relu(ab);
        let bc = t.sub(nb, nc);
        let bc = t.affine(bc, 1.0, gamma);
        let bc = t.relu(bc);
        t.add(ab, bc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{fd, sigmoid, Tensor};
    use proptest::prelude::*;

    #[test]
    #[allow(clippy::approx_constant)]
    fn bce_values() {
        assert!((bce_loss(0.0, true) - 2f64.ln()).abs() < 1e-15);
        assert!((bce_loss(0.0, false) - 0.693147).abs() < 1e-6);
        let sat = bce_loss(20.0, true);
        assert!(sat > 0.0 && sat < 3e-9);
        for i in -100..=100 {
            let z = i as f64 / 10.0;
            let s = sigmoid(z);
            assert!((bce_loss(z, true) + s.ln()).abs() < 1e-9);
            assert!((bce_loss(z, false) + (1.0 - s).ln()).abs() < 1e-9);
        }
    }

    #[test]
    fn triplet_hinge_values() {
        assert_eq!(triplet_hinge(1.0, 5.0, 10.0), 6.0);
        assert_eq!(triplet_hinge(1.0, 12.0, 10.0), 0.0);
        let a = BallPoint::new(vec![0.1, 0.2]).unwrap();
        let n = BallPoint::new(vec![-0.5, 0.3]).unwrap();
        let l = triplet_loss(&a, &a, &n, 10.0);
        assert!((l - (10.0 - distance(&a, &n)).max(0.0)).abs() < 1e-12);
    }

    fn at_norm(r: f64, angle: f64) -> BallPoint {
        BallPoint::new(vec![r * angle.cos(), r * angle.sin()]).unwrap()
    }

    #[test]
    fn norm_reg_values() {
        let l = norm_reg_loss(&at_norm(0.2, 0.1), &at_norm(0.5, 1.0), &at_norm(0.9, 2.0), 0.1);
        assert_eq!(l, 0.0);
        let l = norm_reg_loss(&at_norm(0.5, 0.0), &at_norm(0.5, 1.0), &at_norm(0.5, 2.0), 0.1);
        assert!((l - 0.2).abs() < 1e-12);
        let l = norm_reg_loss(&at_norm(0.6, 0.0), &at_norm(0.4, 1.0), &at_norm(0.9, 2.0), 0.1);
        assert!((l - 0.3).abs() < 1e-12);
    }

    #[test]
    fn total_loss_values() {
        let w = LossWeights::default();
        assert!((total_loss(1.0, 2.0, 3.0, &w) - 4.1).abs() < 1e-15);
        let off = LossWeights { alpha: 0.0, beta: 0.0, ..w };
        assert_eq!(total_loss(1.3, 2.0, 3.0, &off), 1.3);
    }

    #[test]
    fn defaults_and_validation() {
        let w = LossWeights::default();
        assert_eq!((w.alpha, w.lambda_margin, w.beta, w.gamma_margin), (0.05, 10.0, 1.0, 0.1));
        assert!(w.validate().is_ok());
        assert!(LossWeights { beta: -1.0, ..w }.validate().is_err());
        assert!(w.feasibility_warning(3).is_none());
        assert!(w.feasibility_warning(10).is_some());
    }

    #[test]
    fn tape_losses_match_plain_and_finite_differences() {
        let a = [0.1, 0.3, -0.2];
        let p = [0.2, 0.1, 0.0];
        let n = [-0.4, 0.2, 0.5];
        let total = |t: &mut Tape<'_>, x: Var| {
            let pv = t.constant(Tensor::vector(p.to_vec()));
            let nv = t.constant(Tensor::vector(n.to_vec()));
            let trip = tape_ops::triplet(t, x, pv, nv, 10.0, Geometry::Hyperbolic);
            let reg = tape_ops::norm_reg(t, x, pv, nv, 0.1);
            let sup = t.bce_logits(trip, 1.0);
            // sup + alpha trip + beta reg
            let wt = t.affine(trip, 0.05, 0.0);
            let s = t.add(sup, wt);
            t.add(s, reg)
        };
        fd::check_vector(&a, total, 1e-4);
        fd::check_vector(
            &a,
            |t, x| {
                let pv = t.constant(Tensor::vector(p.to_vec()));
                let nv = t.constant(Tensor::vector(n.to_vec()));
                tape_ops::triplet(t, x, pv, nv, 10.0, Geometry::Euclidean)
            },
            1e-4,
        );
        let mut t = Tape::new();
        let (av, pv, nv) = (
            t.constant(Tensor::vector(a.to_vec())),
            t.constant(Tensor::vector(p.to_vec())),
            t.constant(Tensor::vector(n.to_vec())),
        );
        let tr = tape_ops::triplet(&mut t, av, pv, nv, 10.0, Geometry::Hyperbolic);
        let rg = tape_ops::norm_reg(&mut t, av, pv, nv, 0.1);
        let (ab, pb, nb) = (
            BallPoint::new(a.to_vec()).unwrap(),
            BallPoint::new(p.to_vec()).unwrap(),
            BallPoint::new(n.to_vec()).unwrap(),
        );
        assert!((t.scalar(tr) - triplet_loss(&ab, &pb, &nb, 10.0)).abs() < 1e-12);
        assert!((t.scalar(rg) - norm_reg_loss(&ab, &pb, &nb, 0.1)).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn triplet_is_monotone(dap in 0.0f64..20.0, dan in 0.0f64..20.0, bump in 0.0f64..5.0, lambda in 0.0f64..12.0) {
            let base = triplet_hinge(dap, dan, lambda);
            prop_assert!(base >= 0.0);
            prop_assert!(triplet_hinge(dap + bump, dan, lambda) >= base);
            prop_assert!(triplet_hinge(dap, dan + bump, lambda) <= base);
            prop_assert_eq!(base == 0.0, dan >= dap + lambda);
        }

        #[test]
        fn norm_reg_depends_only_on_norms(ra in 0.0f64..0.99, rb in 0.0f64..0.99, rc in 0.0f64..0.99, rot in 0.0f64..6.3) {
            let a = norm_reg_loss(&at_norm(ra, 0.3), &at_norm(rb, 1.1), &at_norm(rc, -0.7), 0.1);
            let b = norm_reg_loss(&at_norm(ra, 0.3 + rot), &at_norm(rb, 1.1 + rot), &at_norm(rc, -0.7 + rot), 0.1);
            prop_assert!(a >= 0.0);
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn total_is_linear(s in -5.0f64..5.0, tr in 0.0f64..5.0, r in 0.0f64..5.0, k in 0.0f64..3.0) {
            let w = LossWeights::default();
            let lhs = total_loss(k * s, k * tr, k * r, &w);
            prop_assert!((lhs - k * total_loss(s, tr, r, &w)).abs() < 1e-9);
        }
    }
}
