//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation applied to its variables; [`Tape::backward`]
//! walks the record in reverse and accumulates vector-Jacobian products. The
//! hyperbolic primitives (`tanh_dir`, `artanh_ratio`, `poincare_dist`,
//! `project`) carry hand-derived adjoints with explicit limits at zero, which
//! keeps the composite Möbius operations free of 0/0 gradients.

use std::borrow::Cow;
use std::collections::BTreeMap;

use super::tensor::{artanh_clamped, matmul_into, sigmoid, Tensor, UnaryOp, ARTANH_CLAMP};
use super::ParamStore;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Below this radius the norm-ratio functions switch to their Taylor series.
const SERIES_RADIUS: f64 = 1e-4;

#[derive(Debug)]
enum Op {
    Leaf,
    MatVec(Var, Var),
    MatMulBT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Max(Var, Var),
    AddRow(Var, Var),
    Scale(Var, Var),
    Affine(Var, f64),
    Unary(Var, UnaryOp),
    Dot(Var, Var),
    SumSq(Var),
    Sum(Var),
    Mean(Var),
    Norm(Var),
    MeanRows(Var),
    Concat(Vec<Var>),
    Reshape(Var),
    Upsample { x: Var, rows: Tensor, cols: Tensor },
    MinMaxNorm { x: Var, argmin: usize, argmax: usize, range: f64 },
    MaskImage(Var, Var),
    Patchify(Var, usize),
    Neighbourhood { x: Var, grid: (usize, usize), radius: usize },
    Recip(Var),
    TanhDir(Var, Var),
    ArtanhRatio(Var),
    PoincareDist(Var, Var),
    EuclidDist(Var, Var),
    Project(Var, f64),
    BceLogits(Var, f64),
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Parameter tensors bound as leaves of a tape, by name.
#[derive(Clone, Debug, Default)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    /// Leaf for `name`. Panics when the parameter was not bound, which is a
    /// wiring bug rather than a data error.
    pub fn get(&self, name: &str) -> Var {
        match self.vars.get(name) {
            Some(v) => *v,
            None => panic!("parameter `{name}` is not bound"),
        }
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

#[derive(Default)]
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }

    /// Gradient of every bound parameter; parameters the output does not
    /// depend on get an explicit zero tensor.
    pub fn params(mut self, bound: &BoundParams, store: &ParamStore) -> BTreeMap<String, Tensor> {
        bound
            .vars
            .iter()
            .map(|(name, v)| {
                let g =
                    self.grads[v.0].take().unwrap_or_else(|| Tensor::zeros(store.get(name).expect("bound").shape()));
                (name.clone(), g)
            })
            .collect()
    }
}

fn dims2(t: &Tensor) -> (usize, usize) {
    match t.shape() {
        [r, c] => (*r, *c),
        s => panic!("expected a matrix, got {s:?}"),
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    super::tensor::dot4(a, b)
}

/// `tanh(k r) / r` and `(d/dr (tanh(k r)/r)) / r`.
fn tanh_ratio(k: f64, r: f64) -> (f64, f64) {
    let u = k * r;
    if u.abs() < SERIES_RADIUS {
        let k3 = k * k * k;
        (k * (1.0 - u * u / 3.0), k3 * (-2.0 / 3.0 + 8.0 * u * u / 15.0))
    } else {
        let t = u.tanh();
        let sech2 = 1.0 - t * t;
        (t / r, (u * sech2 - t) / (r * r * r))
    }
}

/// `artanh(r) / r` and `(d/dr (artanh(r)/r)) / r`, with `r` clamped below 1.
fn artanh_ratio(r: f64) -> (f64, f64) {
    if r < SERIES_RADIUS {
        (1.0 + r * r / 3.0, 2.0 / 3.0 + 4.0 * r * r / 5.0)
    } else if r >= ARTANH_CLAMP {
        (artanh_clamped(r) / r, 0.0)
    } else {
        let a = r.atanh();
        (a / r, (r / (1.0 - r * r) - a) / (r * r * r))
    }
}

/// Poincaré distance `acosh(1 + delta)` evaluated as `ln1p(delta + sqrt(delta (delta + 2)))`.
pub(crate) fn poincare_distance_raw(x: &[f64], y: &[f64]) -> f64 {
    let (delta, ..) = poincare_delta(x, y);
    (delta + (delta * (delta + 2.0)).sqrt()).ln_1p()
}

fn poincare_delta(x: &[f64], y: &[f64]) -> (f64, f64, f64, f64) {
    let ax = (1.0 - dot(x, x)).max(1e-15);
    let ay = (1.0 - dot(y, y)).max(1e-15);
    let diff2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    (2.0 * diff2 / (ax * ay), ax, ay, diff2)
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value: Cow::Owned(value), op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, value: &'p Tensor) -> Var {
        self.nodes.push(Node { value: Cow::Borrowed(value), op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// An owned leaf that receives gradients (used for free embeddings).
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value: Cow::Owned(value), op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value: Cow::Owned(value), op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn constant_ref(&mut self, value: &'p Tensor) -> Var {
        self.nodes.push(Node { value: Cow::Borrowed(value), op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn bind(&mut self, store: &'p ParamStore) -> BoundParams {
        let vars = store.iter().map(|(name, t)| (name.clone(), self.param(t))).collect();
        BoundParams { vars }
    }

    /// `W x` for `W: [m, n]`, `x: [n]`.
    pub fn matvec(&mut self, w: Var, x: Var) -> Var {
        let out = self.value(w).matmul(self.value(x)).expect("matvec shapes");
        self.push(out, Op::MatVec(w, x), &[w, x])
    }

    /// `A B^T` for `A: [m, k]`, `B: [n, k]`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = dims2(self.value(a));
        let (n, k2) = dims2(self.value(b));
        assert_eq!(k, k2, "matmul_bt inner dimensions");
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        let mut nz = Vec::with_capacity(k);
        for i in 0..m {
            let ar = &av[i * k..(i + 1) * k];
            nz.clear();
            nz.extend((0..k).filter(|&p| ar[p] != 0.0));
            if nz.len() * 2 < k {
                // Patch rows are mostly empty; only touch their non-zeros.
                for j in 0..n {
                    let br = &bv[j * k..(j + 1) * k];
                    out[i * n + j] = nz.iter().map(|&p| ar[p] * br[p]).sum();
                }
            } else {
                for j in 0..n {
                    out[i * n + j] = dot(ar, &bv[j * k..(j + 1) * k]);
                }
            }
        }
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMulBT(a, b), &[a, b])
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "elementwise shapes");
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::from_parts(x.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip(a, b, |p, q| p + q);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip(a, b, |p, q| p - q);
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip(a, b, |p, q| p * q);
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn max(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip(a, b, f64::max);
        self.push(out, Op::Max(a, b), &[a, b])
    }

    /// Adds the vector `b: [n]` to every row of `x: [m, n]`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        let (m, n) = dims2(self.value(x));
        let bv = self.value(b).data();
        assert_eq!(bv.len(), n, "add_row width");
        let mut data = self.value(x).data().to_vec();
        for i in 0..m {
            for (d, bj) in data[i * n..(i + 1) * n].iter_mut().zip(bv) {
                *d += bj;
            }
        }
        self.push(Tensor::from_parts(vec![m, n], data), Op::AddRow(x, b), &[x, b])
    }

    /// `x * s` for a scalar variable `s`.
    pub fn scale(&mut self, x: Var, s: Var) -> Var {
        let sv = self.scalar(s);
        let out = self.value(x).scale(sv);
        self.push(out, Op::Scale(x, s), &[x, s])
    }

    /// `a * x + b` with constant `a` and `b`.
    pub fn affine(&mut self, x: Var, a: f64, b: f64) -> Var {
        let out = self.value(x).map(|v| a * v + b);
        self.push(out, Op::Affine(x, a), &[x])
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.affine(x, -1.0, 0.0)
    }

    pub fn unary(&mut self, x: Var, op: UnaryOp) -> Var {
        let out = self.value(x).map(|v| match op {
            UnaryOp::Tanh => v.tanh(),
            UnaryOp::Artanh => artanh_clamped(v),
            UnaryOp::Acosh => v.max(1.0).acosh(),
            UnaryOp::Relu => v.max(0.0),
            UnaryOp::Sigmoid => sigmoid(v),
        });
        self.push(out, Op::Unary(x, op), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, UnaryOp::Relu)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let v = dot(self.value(a).data(), self.value(b).data());
        self.push(Tensor::scalar(v), Op::Dot(a, b), &[a, b])
    }

    pub fn sum_sq(&mut self, x: Var) -> Var {
        let d = self.value(x).data();
        let v = dot(d, d);
        self.push(Tensor::scalar(v), Op::SumSq(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = self.value(x).sum_all();
        self.push(Tensor::scalar(v), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let v = t.sum_all() / t.len() as f64;
        self.push(Tensor::scalar(v), Op::Mean(x), &[x])
    }

    /// Euclidean norm; the gradient at the origin is taken as zero.
    pub fn norm(&mut self, x: Var) -> Var {
        let v = self.value(x).norm();
        self.push(Tensor::scalar(v), Op::Norm(x), &[x])
    }

    /// Column means of `x: [m, n]`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let out = self.value(x).reduce(super::ReduceOp::Mean, 0).expect("mean_rows");
        self.push(out, Op::MeanRows(x), &[x])
    }

    /// Concatenates rank-0/rank-1 values into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let data: Vec<f64> = parts.iter().flat_map(|v| self.value(*v).data().iter().copied()).collect();
        self.push(Tensor::vector(data), Op::Concat(parts.to_vec()), parts)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self.value(x).reshape(shape).expect("reshape");
        self.push(out, Op::Reshape(x), &[x])
    }

    /// Align-corners bilinear upsampling of an `H x W` map.
    pub fn upsample(&mut self, x: Var, factor: usize) -> Var {
        let (h, w) = dims2(self.value(x));
        let rows = super::tensor::interpolation_matrix(h, h * factor);
        let cols = super::tensor::interpolation_matrix(w, w * factor);
        let out = self.value(x).upsample_bilinear(factor).expect("upsample");
        self.push(out, Op::Upsample { x, rows, cols }, &[x])
    }

    /// Min-max normalisation to `[0, 1]`; a constant input maps to all `0.5`.
    pub fn min_max_norm(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let d = t.data();
        let (mut argmin, mut argmax) = (0, 0);
        for (i, &v) in d.iter().enumerate() {
            if v < d[argmin] {
                argmin = i;
            }
            if v > d[argmax] {
                argmax = i;
            }
        }
        let (lo, hi) = (d[argmin], d[argmax]);
        let constant = hi - lo <= 1e-12 * (1.0 + lo.abs().max(hi.abs()));
        let (out, range) =
            if constant { (Tensor::filled(t.shape(), 0.5), 0.0) } else { (t.map(|v| (v - lo) / (hi - lo)), hi - lo) };
        self.push(out, Op::MinMaxNorm { x, argmin, argmax, range }, &[x])
    }

    /// Multiplies an `H x W x C` image by an `H x W` mask broadcast over channels.
    pub fn mask_image(&mut self, image: Var, mask: Var) -> Var {
        let img = self.value(image);
        let m = self.value(mask);
        let (h, w) = dims2(m);
        let c = img.shape()[2];
        assert_eq!(&img.shape()[..2], &[h, w], "mask_image shapes");
        let mut data = img.data().to_vec();
        for (p, &mv) in m.data().iter().enumerate() {
            for v in &mut data[p * c..(p + 1) * c] {
                *v *= mv;
            }
        }
        let shape = img.shape().to_vec();
        self.push(Tensor::from_parts(shape, data), Op::MaskImage(image, mask), &[image, mask])
    }

    /// Splits an `H x W x C` image into non-overlapping `p x p` patches,
    /// returning `[(H/p)(W/p), p*p*C]` in row-major patch order.
    pub fn patchify(&mut self, image: Var, p: usize) -> Var {
        let out = patchify(self.value(image), p);
        self.push(out, Op::Patchify(image, p), &[image])
    }

    /// For a `[gh*gw, L]` grid of rows, concatenates each row with its
    /// neighbours within `radius` cells (zero outside the grid), giving
    /// `[gh*gw, (2r+1)^2 L]`.
    pub fn neighbourhood(&mut self, x: Var, grid: (usize, usize), radius: usize) -> Var {
        let out = neighbourhood(self.value(x), grid, radius, false);
        self.push(out, Op::Neighbourhood { x, grid, radius }, &[x])
    }

    /// Elementwise reciprocal.
    pub fn recip(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| 1.0 / v);
        self.push(out, Op::Recip(x), &[x])
    }

    /// `tanh(k |v|) v / |v|`, defined as `0` at `v = 0`.
    pub fn tanh_dir(&mut self, v: Var, k: Var) -> Var {
        let kv = self.scalar(k);
        let t = self.value(v);
        let (phi, _) = tanh_ratio(kv, t.norm());
        let out = t.scale(phi);
        self.push(out, Op::TanhDir(v, k), &[v, k])
    }

    /// `artanh(|x|) / |x|`, with limit `1` at the origin.
    pub fn artanh_ratio(&mut self, x: Var) -> Var {
        let (chi, _) = artanh_ratio(self.value(x).norm());
        self.push(Tensor::scalar(chi), Op::ArtanhRatio(x), &[x])
    }

    pub fn poincare_dist(&mut self, x: Var, y: Var) -> Var {
        let d = poincare_distance_raw(self.value(x).data(), self.value(y).data());
        self.push(Tensor::scalar(d), Op::PoincareDist(x, y), &[x, y])
    }

    pub fn euclid_dist(&mut self, x: Var, y: Var) -> Var {
        let d: f64 =
            self.value(x).data().iter().zip(self.value(y).data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        self.push(Tensor::scalar(d), Op::EuclidDist(x, y), &[x, y])
    }

    /// Radial projection onto the closed ball of radius `max_norm`.
    pub fn project(&mut self, x: Var, max_norm: f64) -> Var {
        let t = self.value(x);
        let r = t.norm();
        let out = if r > max_norm { t.scale(max_norm / r) } else { t.clone() };
        self.push(out, Op::Project(x, max_norm), &[x])
    }

    /// Binary cross-entropy of a logit against a `{0, 1}` label.
    pub fn bce_logits(&mut self, logit: Var, label: f64) -> Var {
        let z = self.scalar(logit);
        let loss = z.max(0.0) - z * label + (-z.abs()).exp().ln_1p();
        self.push(Tensor::scalar(loss), Op::BceLogits(logit, label), &[logit])
    }

    /// Reverse sweep seeded with `d output / d output = 1`.
    pub fn backward(&self, output: Var) -> Gradients {
        let seed = Tensor::filled(self.value(output).shape(), 1.0);
        self.backward_with(&[(output, seed)])
    }

    /// Reverse sweep from arbitrary seed adjoints.
    pub fn backward_with(&self, seeds: &[(Var, Tensor)]) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut top = 0;
        for (v, g) in seeds {
            accumulate(&mut grads, *v, g.clone());
            top = top.max(v.0 + 1);
        }
        for idx in (0..top).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatVec(w, x) => {
                let (wv, xv) = (self.value(*w), self.value(*x));
                let (m, n) = dims2(wv);
                if self.wants(*w) {
                    let mut gw = vec![0.0; m * n];
                    for i in 0..m {
                        let gi = g.data()[i];
                        if gi == 0.0 {
                            continue;
                        }
                        for (o, xj) in gw[i * n..(i + 1) * n].iter_mut().zip(xv.data()) {
                            *o = gi * xj;
                        }
                    }
                    accumulate(grads, *w, Tensor::from_parts(vec![m, n], gw));
                }
                if self.wants(*x) {
                    let mut gx = vec![0.0; n];
                    matmul_into(g.data(), wv.data(), &mut gx, 1, m, n);
                    accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), gx));
                }
            }
            Op::MatMulBT(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = dims2(av);
                let (n, _) = dims2(bv);
                if self.wants(*a) {
                    let mut ga = vec![0.0; m * k];
                    matmul_into(g.data(), bv.data(), &mut ga, m, n, k);
                    accumulate(grads, *a, Tensor::from_parts(vec![m, k], ga));
                }
                if self.wants(*b) {
                    let (ad, gd) = (av.data(), g.data());
                    let mut gb = vec![0.0; n * k];
                    for i in 0..m {
                        let ar = &ad[i * k..(i + 1) * k];
                        for (p, &x) in ar.iter().enumerate().filter(|(_, x)| **x != 0.0) {
                            for j in 0..n {
                                gb[j * k + p] += gd[i * n + j] * x;
                            }
                        }
                    }
                    accumulate(grads, *b, Tensor::from_parts(vec![n, k], gb));
                }
            }
            Op::Add(a, b) => {
                self.send(grads, *a, || g.clone());
                self.send(grads, *b, || g.clone());
            }
            Op::Sub(a, b) => {
                self.send(grads, *a, || g.clone());
                self.send(grads, *b, || g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.send(grads, *a, || zip_with(g, bv, |p, q| p * q));
                self.send(grads, *b, || zip_with(g, av, |p, q| p * q));
            }
            Op::Max(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let pick_a: Vec<bool> = av.data().iter().zip(bv.data()).map(|(p, q)| p >= q).collect();
                self.send(grads, *a, || {
                    let d = g.data().iter().zip(&pick_a).map(|(gv, &s)| if s { *gv } else { 0.0 }).collect();
                    Tensor::from_parts(g.shape().to_vec(), d)
                });
                self.send(grads, *b, || {
                    let d = g.data().iter().zip(&pick_a).map(|(gv, &s)| if s { 0.0 } else { *gv }).collect();
                    Tensor::from_parts(g.shape().to_vec(), d)
                });
            }
            Op::AddRow(x, b) => {
                self.send(grads, *x, || g.clone());
                self.send(grads, *b, || g.reduce(super::ReduceOp::Sum, 0).expect("matrix"));
            }
            Op::Scale(x, s) => {
                let sv = self.scalar(*s);
                self.send(grads, *x, || g.scale(sv));
                self.send(grads, *s, || Tensor::scalar(dot(g.data(), self.value(*x).data())));
            }
            Op::Affine(x, a) => self.send(grads, *x, || g.scale(*a)),
            Op::Unary(x, op) => {
                let xv = self.value(*x);
                let d = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .zip(y.data())
                    .map(|((gv, &xi), &yi)| {
                        gv * match op {
                            UnaryOp::Tanh => 1.0 - yi * yi,
                            UnaryOp::Artanh => {
                                if xi.abs() >= ARTANH_CLAMP {
                                    0.0
                                } else {
                                    1.0 / (1.0 - xi * xi)
                                }
                            }
                            UnaryOp::Acosh => {
                                if xi > 1.0 {
                                    1.0 / (xi * xi - 1.0).sqrt()
                                } else {
                                    0.0
                                }
                            }
                            UnaryOp::Relu => {
                                if xi > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            UnaryOp::Sigmoid => yi * (1.0 - yi),
                        }
                    })
                    .collect();
                accumulate(grads, *x, Tensor::from_parts(g.shape().to_vec(), d));
            }
            Op::Dot(a, b) => {
                let gs = g.item();
                let (av, bv) = (self.value(*a), self.value(*b));
                self.send(grads, *a, || bv.scale(gs));
                self.send(grads, *b, || av.scale(gs));
            }
            Op::SumSq(x) => {
                let gs = g.item();
                self.send(grads, *x, || self.value(*x).scale(2.0 * gs));
            }
            Op::Sum(x) => {
                let gs = g.item();
                self.send(grads, *x, || Tensor::filled(self.value(*x).shape(), gs));
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let gs = g.item() / xv.len() as f64;
                self.send(grads, *x, || Tensor::filled(xv.shape(), gs));
            }
            Op::Norm(x) => {
                let r = y.item();
                if r > 0.0 {
                    let gs = g.item() / r;
                    self.send(grads, *x, || self.value(*x).scale(gs));
                }
            }
            Op::MeanRows(x) => {
                let (m, n) = dims2(self.value(*x));
                self.send(grads, *x, || {
                    let mut d = Vec::with_capacity(m * n);
                    for _ in 0..m {
                        d.extend(g.data().iter().map(|v| v / m as f64));
                    }
                    Tensor::from_parts(vec![m, n], d)
                });
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let pv = self.value(*p);
                    let n = pv.len();
                    self.send(grads, *p, || {
                        Tensor::from_parts(pv.shape().to_vec(), g.data()[offset..offset + n].to_vec())
                    });
                    offset += n;
                }
            }
            Op::Reshape(x) => {
                self.send(grads, *x, || g.reshape(self.value(*x).shape()).expect("same size"));
            }
            Op::Upsample { x, rows, cols } => {
                self.send(grads, *x, || {
                    let t = rows.transpose().expect("matrix").matmul(g).expect("shapes");
                    t.matmul(cols).expect("shapes")
                });
            }
            Op::MinMaxNorm { x, argmin, argmax, range } => {
                if *range > 0.0 {
                    let xv = self.value(*x);
                    let r = *range;
                    let lo = xv.data()[*argmin];
                    let mut gx: Vec<f64> = g.data().iter().map(|gv| gv / r).collect();
                    let mut g_lo = 0.0;
                    let mut g_hi = 0.0;
                    for (gv, xi) in g.data().iter().zip(xv.data()) {
                        let t = (xi - lo) / (r * r);
                        g_lo += gv * (t - 1.0 / r);
                        g_hi -= gv * t;
                    }
                    gx[*argmin] += g_lo;
                    gx[*argmax] += g_hi;
                    accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), gx));
                }
            }
            Op::MaskImage(image, mask) => {
                let (img, m) = (self.value(*image), self.value(*mask));
                let c = img.shape()[2];
                self.send(grads, *image, || {
                    let mut d = g.data().to_vec();
                    for (p, &mv) in m.data().iter().enumerate() {
                        for v in &mut d[p * c..(p + 1) * c] {
                            *v *= mv;
                        }
                    }
                    Tensor::from_parts(img.shape().to_vec(), d)
                });
                self.send(grads, *mask, || {
                    let d = (0..m.len())
                        .map(|p| dot(&g.data()[p * c..(p + 1) * c], &img.data()[p * c..(p + 1) * c]))
                        .collect();
                    Tensor::from_parts(m.shape().to_vec(), d)
                });
            }
            Op::Patchify(image, p) => {
                let shape = self.value(*image).shape().to_vec();
                self.send(grads, *image, || unpatchify(g, &shape, *p));
            }
            Op::Neighbourhood { x, grid, radius } => {
                self.send(grads, *x, || neighbourhood(g, *grid, *radius, true));
            }
            Op::Recip(x) => {
                let d = g.data().iter().zip(y.data()).map(|(gv, yi)| -gv * yi * yi).collect();
                accumulate(grads, *x, Tensor::from_parts(g.shape().to_vec(), d));
            }
            Op::TanhDir(v, k) => {
                let vv = self.value(*v);
                let kv = self.scalar(*k);
                let r = vv.norm();
                let (phi, psi) = tanh_ratio(kv, r);
                let vg = dot(vv.data(), g.data());
                self.send(grads, *v, || {
                    let d = g.data().iter().zip(vv.data()).map(|(gi, vi)| phi * gi + psi * vg * vi).collect();
                    Tensor::from_parts(vv.shape().to_vec(), d)
                });
                self.send(grads, *k, || {
                    let t = (kv * r).tanh();
                    Tensor::scalar((1.0 - t * t) * vg)
                });
            }
            Op::ArtanhRatio(x) => {
                let xv = self.value(*x);
                let (_, dchi) = artanh_ratio(xv.norm());
                let gs = g.item() * dchi;
                self.send(grads, *x, || xv.scale(gs));
            }
            Op::PoincareDist(x, yv) => {
                let (xd, yd) = (self.value(*x).data(), self.value(*yv).data());
                let (delta, ax, ay, diff2) = poincare_delta(xd, yd);
                if delta > 1e-300 {
                    let dd = g.item() / (delta * (delta + 2.0)).sqrt();
                    let base = 4.0 / (ax * ay);
                    self.send(grads, *x, || {
                        let d = xd
                            .iter()
                            .zip(yd)
                            .map(|(a, b)| dd * (base * (a - b) + 4.0 * diff2 * a / (ax * ax * ay)))
                            .collect();
                        Tensor::from_parts(vec![xd.len()], d)
                    });
                    self.send(grads, *yv, || {
                        let d = xd
                            .iter()
                            .zip(yd)
                            .map(|(a, b)| dd * (-base * (a - b) + 4.0 * diff2 * b / (ax * ay * ay)))
                            .collect();
                        Tensor::from_parts(vec![yd.len()], d)
                    });
                }
            }
            Op::EuclidDist(x, yv) => {
                let r = y.item();
                if r > 0.0 {
                    let gs = g.item() / r;
                    let (xd, yd) = (self.value(*x), self.value(*yv));
                    self.send(grads, *x, || zip_with(xd, yd, |a, b| gs * (a - b)));
                    self.send(grads, *yv, || zip_with(xd, yd, |a, b| gs * (b - a)));
                }
            }
            Op::Project(x, max_norm) => {
                let xv = self.value(*x);
                let r = xv.norm();
                if r > *max_norm {
                    let s = max_norm / r;
                    let xg = dot(xv.data(), g.data()) / (r * r);
                    self.send(grads, *x, || {
                        let d = g.data().iter().zip(xv.data()).map(|(gi, xi)| s * (gi - xg * xi)).collect();
                        Tensor::from_parts(xv.shape().to_vec(), d)
                    });
                } else {
                    self.send(grads, *x, || g.clone());
                }
            }
            Op::BceLogits(z, label) => {
                let zv = self.scalar(*z);
                self.send(grads, *z, || Tensor::scalar(g.item() * (sigmoid(zv) - label)));
            }
        }
    }

    fn send(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce() -> Tensor) {
        if self.wants(v) {
            accumulate(grads, v, f());
        }
    }
}

fn zip_with(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let d = a.data().iter().zip(b.data()).map(|(&p, &q)| f(p, q)).collect();
    Tensor::from_parts(a.shape().to_vec(), d)
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Patch extraction shared by the tape op and plain callers.
pub fn patchify(image: &Tensor, p: usize) -> Tensor {
    let [h, w, c] = image.shape()[..] else { panic!("patchify expects H x W x C") };
    assert!(p > 0 && h % p == 0 && w % p == 0, "patch size must divide the image");
    let (nh, nw) = (h / p, w / p);
    let width = p * p * c;
    let src = image.data();
    let mut out = vec![0.0; nh * nw * width];
    for bi in 0..nh {
        for bj in 0..nw {
            let row = (bi * nw + bj) * width;
            for di in 0..p {
                let y = bi * p + di;
                let src_off = (y * w + bj * p) * c;
                let dst_off = row + di * p * c;
                out[dst_off..dst_off + p * c].copy_from_slice(&src[src_off..src_off + p * c]);
            }
        }
    }
    Tensor::from_parts(vec![nh * nw, width], out)
}

/// Gathers neighbour rows, or with `adjoint` scatter-adds them back.
fn neighbourhood(x: &Tensor, (gh, gw): (usize, usize), radius: usize, adjoint: bool) -> Tensor {
    let side = 2 * radius + 1;
    let l = if adjoint { x.shape()[1] / (side * side) } else { x.shape()[1] };
    let width = side * side * l;
    let n = gh * gw;
    let (mut out, src) = if adjoint { (vec![0.0; n * l], x.data()) } else { (vec![0.0; n * width], x.data()) };
    for i in 0..gh {
        for j in 0..gw {
            for di in 0..side {
                for dj in 0..side {
                    let (y, z) = ((i + di).wrapping_sub(radius), (j + dj).wrapping_sub(radius));
                    if y >= gh || z >= gw {
                        continue;
                    }
                    let slot = (i * gw + j) * width + (di * side + dj) * l;
                    let cell = (y * gw + z) * l;
                    if adjoint {
                        for (o, v) in out[cell..cell + l].iter_mut().zip(&src[slot..slot + l]) {
                            *o += v;
                        }
                    } else {
                        out[slot..slot + l].copy_from_slice(&src[cell..cell + l]);
                    }
                }
            }
        }
    }
    let shape = if adjoint { vec![n, l] } else { vec![n, width] };
    Tensor::from_parts(shape, out)
}

fn unpatchify(g: &Tensor, shape: &[usize], p: usize) -> Tensor {
    let [h, w, c] = shape[..] else { unreachable!() };
    let (nh, nw) = (h / p, w / p);
    let width = p * p * c;
    let mut out = vec![0.0; h * w * c];
    for bi in 0..nh {
        for bj in 0..nw {
            let row = (bi * nw + bj) * width;
            for di in 0..p {
                let y = bi * p + di;
                let dst_off = (y * w + bj * p) * c;
                let src_off = row + di * p * c;
                out[dst_off..dst_off + p * c].copy_from_slice(&g.data()[src_off..src_off + p * c]);
            }
        }
    }
    Tensor::from_parts(shape.to_vec(), out)
}
