//! Object-conditioned scene encoder and the joint image-predicate
//! representation fed to the hyperbolic head.
//!
//! Image features come from a learnable linear patchifier, object and
//! predicate names from hashed character trigrams. Each object's text feature
//! filters the projected image features cell by cell; the resulting map is
//! upsampled, min-max normalised, combined over objects by elementwise max
//! and multiplied into the image before the masked encoder sees it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hypnet::kaiming;
use crate::numcore::{BoundParams, ParamStore, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EncoderError {
    #[error("empty name")]
    EmptyName,
    #[error("expected 1 or 2 objects, got {0}")]
    ObjectCount(usize),
    #[error("image shape {got:?}, expected {expected:?}")]
    ImageShape { got: Vec<usize>, expected: Vec<usize> },
    #[error("invalid encoder dims: {0}")]
    Dims(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub const TRIGRAM_BUCKETS: usize = 64;

pub const FEAT_WEIGHT: &str = "enc.feat.weight";
pub const FEAT_BIAS: &str = "enc.feat.bias";
pub const PROJ_WEIGHT: &str = "enc.proj_c.weight";
pub const PROJ_BIAS: &str = "enc.proj_c.bias";
pub const TEXT_WEIGHT: &str = "enc.text.weight";
pub const VIT_PATCH_WEIGHT: &str = "enc.vit.patch.weight";
pub const VIT_PATCH_BIAS: &str = "enc.vit.patch.bias";
pub const VIT_POS: &str = "enc.vit.pos";
pub const VIT_MIX_WEIGHT: &str = "enc.vit.mix.weight";
pub const VIT_MIX_BIAS: &str = "enc.vit.mix.bias";
pub const VIT_FC1_WEIGHT: &str = "enc.vit.fc1.weight";
pub const VIT_FC1_BIAS: &str = "enc.vit.fc1.bias";
pub const VIT_FC2_WEIGHT: &str = "enc.vit.fc2.weight";
pub const VIT_FC2_BIAS: &str = "enc.vit.fc2.bias";
pub const PRED_WEIGHT: &str = "enc.pred.weight";
pub const FUSE_WEIGHT: &str = "enc.fuse.weight";
pub const FUSE_BIAS: &str = "enc.fuse.bias";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderDims {
    /// Input image `(H, W, C)`.
    pub image: (usize, usize, usize),
    /// Patch side; the feature grid is `(H / patch) x (W / patch)`.
    pub patch: usize,
    /// Masked-encoder tokens also see the patches within this many cells.
    pub neighbourhood: usize,
    /// Image feature dimension.
    pub d1: usize,
    /// Text feature dimension.
    pub d2: usize,
    /// Token width of the masked encoder.
    pub token: usize,
    pub hidden: usize,
    pub scene_out: usize,
    pub pred_out: usize,
    /// Width of the joint representation (the hyperbolic input).
    pub joint: usize,
}

impl Default for EncoderDims {
    fn default() -> Self {
        EncoderDims {
            image: (32, 32, 10),
            patch: 4,
            neighbourhood: 1,
            d1: 16,
            d2: 16,
            token: 32,
            hidden: 64,
            scene_out: 128,
            pred_out: 32,
            joint: 256,
        }
    }
}

impl EncoderDims {
    pub fn grid(&self) -> (usize, usize) {
        (self.image.0 / self.patch, self.image.1 / self.patch)
    }

    fn patch_len(&self) -> usize {
        self.patch * self.patch * self.image.2
    }

    fn mix_input(&self) -> usize {
        let side = 2 * self.neighbourhood + 1;
        side * side * self.token
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        let (h, w, c) = self.image;
        let all =
            [h, w, c, self.patch, self.d1, self.d2, self.token, self.hidden, self.scene_out, self.pred_out, self.joint];
        if all.contains(&0) {
            return Err(EncoderError::Dims("all sizes must be positive".into()));
        }
        if h % self.patch != 0 || w % self.patch != 0 {
            return Err(EncoderError::Dims(format!("patch {} does not tile {h}x{w}", self.patch)));
        }
        Ok(())
    }
}

/// FNV-1a, 64-bit.
fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Unit-norm bag of character trigrams of `^text$`, hashed into
/// [`TRIGRAM_BUCKETS`] buckets with FNV-1a.
pub fn trigram_features(text: &str) -> Result<Tensor, EncoderError> {
    if text.is_empty() {
        return Err(EncoderError::EmptyName);
    }
    let chars: Vec<char> = std::iter::once('^').chain(text.chars()).chain(std::iter::once('$')).collect();
    let mut v = vec![0.0; TRIGRAM_BUCKETS];
    for w in chars.windows(3) {
        let s: String = w.iter().collect();
        v[(fnv1a(s.as_bytes()) % TRIGRAM_BUCKETS as u64) as usize] += 1.0;
    }
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    Ok(Tensor::vector(v.into_iter().map(|x| x / n).collect()))
}

/// Adds freshly initialised encoder parameters to `store`.
pub fn init_params(dims: &EncoderDims, seed: u64, store: &mut ParamStore) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (gh, gw) = dims.grid();
    let pl = dims.patch_len();
    let zeros = |n| Tensor::zeros(&[n]);
    store.insert(FEAT_WEIGHT, kaiming(dims.d1, pl, &mut rng));
    store.insert(FEAT_BIAS, zeros(dims.d1));
    store.insert(PROJ_WEIGHT, kaiming(dims.d2, dims.d1, &mut rng));
    store.insert(PROJ_BIAS, zeros(dims.d2));
    store.insert(TEXT_WEIGHT, kaiming(dims.d2, TRIGRAM_BUCKETS, &mut rng));
    store.insert(VIT_PATCH_WEIGHT, kaiming(dims.token, pl, &mut rng));
    store.insert(VIT_PATCH_BIAS, zeros(dims.token));
    let pos = Normal::new(0.0, 0.02).expect("positive std");
    let pos = (0..gh * gw * dims.token).map(|_| pos.sample(&mut rng)).collect();
    store.insert(VIT_POS, Tensor::new(vec![gh * gw, dims.token], pos).expect("pos shape"));
    store.insert(VIT_MIX_WEIGHT, kaiming(dims.token, dims.mix_input(), &mut rng));
    store.insert(VIT_MIX_BIAS, zeros(dims.token));
    store.insert(VIT_FC1_WEIGHT, kaiming(dims.hidden, dims.token, &mut rng));
    store.insert(VIT_FC1_BIAS, zeros(dims.hidden));
    store.insert(VIT_FC2_WEIGHT, kaiming(dims.scene_out, dims.hidden, &mut rng));
    store.insert(VIT_FC2_BIAS, zeros(dims.scene_out));
    store.insert(PRED_WEIGHT, kaiming(dims.pred_out, TRIGRAM_BUCKETS, &mut rng));
    store.insert(FUSE_WEIGHT, kaiming(dims.joint, dims.scene_out + dims.pred_out, &mut rng));
    store.insert(FUSE_BIAS, zeros(dims.joint));
}

/// Encoder parameters as tape variables.
#[derive(Clone, Copy, Debug)]
pub struct EncoderVars {
    pub feat_w: Var,
    pub feat_b: Var,
    pub proj_w: Var,
    pub proj_b: Var,
    pub text_w: Var,
    pub vit_w: Var,
    pub vit_b: Var,
    pub vit_pos: Var,
    pub mix_w: Var,
    pub mix_b: Var,
    pub fc1_w: Var,
    pub fc1_b: Var,
    pub fc2_w: Var,
    pub fc2_b: Var,
    pub pred_w: Var,
    pub fuse_w: Var,
    pub fuse_b: Var,
}

impl EncoderVars {
    pub fn from_bound(b: &BoundParams) -> Self {
        EncoderVars {
            feat_w: b.get(FEAT_WEIGHT),
            feat_b: b.get(FEAT_BIAS),
            proj_w: b.get(PROJ_WEIGHT),
            proj_b: b.get(PROJ_BIAS),
            text_w: b.get(TEXT_WEIGHT),
            vit_w: b.get(VIT_PATCH_WEIGHT),
            vit_b: b.get(VIT_PATCH_BIAS),
            vit_pos: b.get(VIT_POS),
            mix_w: b.get(VIT_MIX_WEIGHT),
            mix_b: b.get(VIT_MIX_BIAS),
            fc1_w: b.get(VIT_FC1_WEIGHT),
            fc1_b: b.get(VIT_FC1_BIAS),
            fc2_w: b.get(VIT_FC2_WEIGHT),
            fc2_b: b.get(VIT_FC2_BIAS),
            pred_w: b.get(PRED_WEIGHT),
            fuse_w: b.get(FUSE_WEIGHT),
            fuse_b: b.get(FUSE_BIAS),
        }
    }
}

/// Everything `joint_rep` needs besides parameters.
#[derive(Clone, Debug)]
pub struct EncoderInput {
    pub image: Tensor,
    /// Trigram features of each queried object name.
    pub objects: Vec<Tensor>,
    /// Trigram features of the predicate conditioning text.
    pub text: Tensor,
}

pub mod tape_ops {
    use super::*;

    fn linear(t: &mut Tape<'_>, w: Var, b: Var, x: Var) -> Var {
        let y = t.matvec(w, x);
        t.add(y, b)
    }

    /// Projected image features `C(V(I))`, one row per grid cell.
    pub fn cell_features(t: &mut Tape<'_>, ev: &EncoderVars, dims: &EncoderDims, image: Var) -> Var {
        let patches = t.patchify(image, dims.patch);
        let v = t.matmul_bt(patches, ev.feat_w);
        let v = t.add_row(v, ev.feat_b);
        let cv = t.matmul_bt(v, ev.proj_w);
        t.add_row(cv, ev.proj_b)
    }

    /// `normalize(upsample(C(V(I)) · T(o)))` over the full image.
    pub fn object_mask(t: &mut Tape<'_>, ev: &EncoderVars, dims: &EncoderDims, cells: Var, object: Var) -> Var {
        let filt = t.matvec(ev.text_w, object);
        let scores = t.matvec(cells, filt);
        let (gh, gw) = dims.grid();
        let grid = t.reshape(scores, &[gh, gw]);
        let up = t.upsample(grid, dims.patch);
        t.min_max_norm(up)
    }

    pub fn combined_mask(t: &mut Tape<'_>, ev: &EncoderVars, dims: &EncoderDims, image: Var, objects: &[Var]) -> Var {
        let cells = cell_features(t, ev, dims, image);
        let mut masks = objects.iter().map(|&o| object_mask(t, ev, dims, cells, o));
        let first = masks.next().expect("at least one object");
        let rest: Vec<Var> = masks.collect();
        rest.into_iter().fold(first, |m, x| t.max(m, x))
    }

    /// The masked-image encoder: patch tokens with positions, one layer
    /// mixing each token with its grid neighbours, mean pooling and a
    /// two-layer perceptron.
    pub fn encode_scene(t: &mut Tape<'_>, ev: &EncoderVars, dims: &EncoderDims, masked: Var) -> Var {
        let patches = t.patchify(masked, dims.patch);
        let tok = t.matmul_bt(patches, ev.vit_w);
        let tok = t.add_row(tok, ev.vit_b);
        let tok = t.add(tok, ev.vit_pos);
        let tok = t.relu(tok);
        let near = t.neighbourhood(tok, dims.grid(), dims.neighbourhood);
        let tok = t.matmul_bt(near, ev.mix_w);
        let tok = t.add_row(tok, ev.mix_b);
        let tok = t.relu(tok);
        let pooled = t.mean_rows(tok);
        let h = linear(t, ev.fc1_w, ev.fc1_b, pooled);
        let h = t.relu(h);
        linear(t, ev.fc2_w, ev.fc2_b, h)
    }

    pub fn encode_predicate(t: &mut Tape<'_>, ev: &EncoderVars, text: Var) -> Var {
        t.matvec(ev.pred_w, text)
    }

    /// `relu(fuse(concat(E_img, E_text)))`; without a mask the image enters
    /// unchanged. The ReLU lets scene and predicate features interact before
    /// the head, which is close to linear at its initial scale.
    pub fn joint_rep(
        t: &mut Tape<'_>,
        ev: &EncoderVars,
        dims: &EncoderDims,
        image: Var,
        objects: &[Var],
        text: Var,
        use_mask: bool,
    ) -> Var {
        let masked = if use_mask {
            let m = combined_mask(t, ev, dims, image, objects);
            t.mask_image(image, m)
        } else {
            image
        };
        let scene = encode_scene(t, ev, dims, masked);
        let pred = encode_predicate(t, ev, text);
        let joint = t.concat(&[scene, pred]);
        let fused = linear(t, ev.fuse_w, ev.fuse_b, joint);
        t.relu(fused)
    }
}

fn check_image(dims: &EncoderDims, image: &Tensor) -> Result<(), EncoderError> {
    let expected = vec![dims.image.0, dims.image.1, dims.image.2];
    if image.shape() != expected.as_slice() {
        return Err(EncoderError::ImageShape { got: image.shape().to_vec(), expected });
    }
    Ok(())
}

fn run<'p, T>(
    params: &'p ParamStore,
    f: impl FnOnce(&mut Tape<'p>, &EncoderVars) -> Var,
    out: impl Fn(&Tensor) -> T,
) -> T {
    let mut t = Tape::new();
    let bound = t.bind(params);
    let ev = EncoderVars::from_bound(&bound);
    let v = f(&mut t, &ev);
    out(t.value(v))
}

pub fn object_mask(
    params: &ParamStore,
    dims: &EncoderDims,
    image: &Tensor,
    name: &str,
) -> Result<Tensor, EncoderError> {
    combined_mask(params, dims, image, &[name])
}

pub fn combined_mask(
    params: &ParamStore,
    dims: &EncoderDims,
    image: &Tensor,
    names: &[&str],
) -> Result<Tensor, EncoderError> {
    check_image(dims, image)?;
    if names.is_empty() || names.len() > 2 {
        return Err(EncoderError::ObjectCount(names.len()));
    }
    let feats = names.iter().map(|n| trigram_features(n)).collect::<Result<Vec<_>, _>>()?;
    Ok(run(
        params,
        |t, ev| {
            let img = t.constant_ref(image);
            let objs: Vec<Var> = feats.iter().map(|f| t.constant(f.clone())).collect();
            tape_ops::combined_mask(t, ev, dims, img, &objs)
        },
        Tensor::clone,
    ))
}

/// Encodes the image after masking it with the given objects' combined mask;
/// an empty name list leaves the image unmasked.
pub fn encode_scene(
    params: &ParamStore,
    dims: &EncoderDims,
    image: &Tensor,
    names: &[&str],
) -> Result<Tensor, EncoderError> {
    check_image(dims, image)?;
    if names.len() > 2 {
        return Err(EncoderError::ObjectCount(names.len()));
    }
    let feats = names.iter().map(|n| trigram_features(n)).collect::<Result<Vec<_>, _>>()?;
    Ok(run(
        params,
        |t, ev| {
            let img = t.constant_ref(image);
            let masked = if feats.is_empty() {
                img
            } else {
                let objs: Vec<Var> = feats.iter().map(|f| t.constant(f.clone())).collect();
                let m = tape_ops::combined_mask(t, ev, dims, img, &objs);
                t.mask_image(img, m)
            };
            tape_ops::encode_scene(t, ev, dims, masked)
        },
        Tensor::clone,
    ))
}

pub fn encode_predicate(params: &ParamStore, name: &str) -> Result<Tensor, EncoderError> {
    let f = trigram_features(name)?;
    Ok(run(
        params,
        |t, ev| {
            let x = t.constant(f);
            tape_ops::encode_predicate(t, ev, x)
        },
        Tensor::clone,
    ))
}

pub fn joint_rep(
    params: &ParamStore,
    dims: &EncoderDims,
    input: &EncoderInput,
    use_mask: bool,
) -> Result<Tensor, EncoderError> {
    check_image(dims, &input.image)?;
    if input.objects.is_empty() || input.objects.len() > 2 {
        return Err(EncoderError::ObjectCount(input.objects.len()));
    }
    Ok(run(
        params,
        |t, ev| {
            let img = t.constant_ref(&input.image);
            let objs: Vec<Var> = input.objects.iter().map(|o| t.constant_ref(o)).collect();
            let text = t.constant_ref(&input.text);
            tape_ops::joint_rep(t, ev, dims, img, &objs, text, use_mask)
        },
        Tensor::clone,
    ))
}
