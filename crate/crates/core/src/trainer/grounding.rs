//! Grounding the image/text feature provider before the main run: every
//! category name's text feature is aligned with the grid cells its object
//! occupies, for all objects in the training scenes. This stands in for the
//! name-to-region alignment a pretrained vision-language provider brings.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{self, tape_ops as enc_ops, trigram_features, EncoderVars};
use crate::numcore::{Tape, Tensor, UnaryOp};
use crate::par::{derive_seed, map_indexed};
use crate::scenes::{render, Category, Scene, SCALE};

use super::optim::{AdamHyper, AdamState};
use super::{Model, TrainError};

/// Parameters the grounding stage updates.
pub const PROVIDER_PARAMS: [&str; 5] =
    [encoder::FEAT_WEIGHT, encoder::FEAT_BIAS, encoder::PROJ_WEIGHT, encoder::PROJ_BIAS, encoder::TEXT_WEIGHT];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GroundingConfig {
    /// Passes over the training scenes; 0 skips grounding.
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for GroundingConfig {
    fn default() -> Self {
        GroundingConfig { epochs: 3, lr: 3e-3, batch_size: 16 }
    }
}

/// Cell occupancy of `category` on the feature grid, 1 inside its rectangle.
fn occupancy(scene: &Scene, category: Category, grid: (usize, usize), patch: usize) -> Tensor {
    let (gh, gw) = grid;
    let mut v = vec![0.0; gh * gw];
    // The feature grid coincides with the scene grid when patches are one cell.
    let k = SCALE / patch.min(SCALE);
    if let Some(o) = scene.objects.iter().find(|o| o.category == category) {
        for y in o.rect.y as usize * k..o.rect.bottom() as usize * k {
            for x in o.rect.x as usize * k..o.rect.right() as usize * k {
                if y < gh && x < gw {
                    v[y * gw + x] = 1.0;
                }
            }
        }
    }
    Tensor::vector(v)
}

/// Mean over cells and categories of `(sigmoid(score) - occupancy)^2`.
fn scene_loss(model: &Model, scene: &Scene, names: &[Tensor]) -> (f64, BTreeMap<String, Tensor>) {
    let dims = &model.encoder;
    let mut t = Tape::new();
    let bound = t.bind(&model.params);
    let ev = EncoderVars::from_bound(&bound);
    let image = t.constant(render(scene));
    let cells = enc_ops::cell_features(&mut t, &ev, dims, image);
    let mut total = None;
    for (c, name) in Category::ALL.iter().zip(names) {
        let feat = t.constant_ref(name);
        let filt = t.matvec(ev.text_w, feat);
        let scores = t.matvec(cells, filt);
        let p = t.unary(scores, UnaryOp::Sigmoid);
        let target = t.constant(occupancy(scene, *c, dims.grid(), dims.patch));
        let diff = t.sub(p, target);
        let sq = t.sum_sq(diff);
        total = Some(match total {
            None => sq,
            Some(acc) => t.add(acc, sq),
        });
    }
    let n = (names.len() * dims.grid().0 * dims.grid().1) as f64;
    let loss = t.affine(total.expect("categories"), 1.0 / n, 0.0);
    let value = t.scalar(loss);
    let mut grads = t.backward(loss).params(&bound, &model.params);
    grads.retain(|k, _| PROVIDER_PARAMS.contains(&k.as_str()));
    (value, grads)
}

/// Runs the grounding stage on `scenes` and returns the mean loss per epoch.
pub fn ground_provider(
    model: &mut Model,
    cfg: &GroundingConfig,
    scenes: &[&Scene],
    seed: u64,
    exec: crate::Exec,
) -> Result<Vec<f64>, TrainError> {
    if cfg.epochs == 0 || scenes.is_empty() {
        return Ok(Vec::new());
    }
    if cfg.batch_size == 0 || !(cfg.lr.is_finite() && cfg.lr > 0.0) {
        return Err(TrainError::Config("grounding needs a positive batch size and lr".into()));
    }
    let names: Vec<Tensor> = Category::ALL.iter().map(|c| trigram_features(c.name())).collect::<Result<_, _>>()?;
    let mut adam = AdamState::new(&model.params);
    let hyper = AdamHyper { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 };
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..scenes.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[epoch as u64])));
        let mut sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let m = &*model;
            let parts = map_indexed(exec, batch.len(), |i| scene_loss(m, scenes[batch[i]], &names));
            let k = 1.0 / batch.len() as f64;
            let mut grads: BTreeMap<String, Tensor> = parts[0].1.iter().map(|(n, g)| (n.clone(), g.scale(k))).collect();
            for (_, g) in &parts[1..] {
                for (n, v) in g {
                    grads.get_mut(n).expect("same keys").add_scaled(v, k);
                }
            }
            let loss: f64 = parts.iter().map(|(l, _)| l).sum();
            if !loss.is_finite() {
                return Err(TrainError::NonFinite { term: "grounding", epoch, step: 0 });
            }
            sum += loss;
            adam.update(&mut model.params, &grads, cfg.lr, hyper);
        }
        curve.push(sum / scenes.len() as f64);
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenes::{default_manifest, generate_dataset, DatasetManifest};
    use crate::trainer::RunConfig;

    #[test]
    fn grounding_lowers_its_loss_and_touches_only_the_provider() {
        let m = DatasetManifest { train_per_label: 4, test_per_label: 1, fewshot_per_label: 1, ..default_manifest(2) };
        let d = generate_dataset(&m, crate::Exec::Sequential).unwrap();
        let scenes: Vec<&Scene> = d.train.iter().map(|e| &e.scene).collect();
        let cfg = RunConfig { exec: crate::Exec::Sequential, ..RunConfig::default() };
        let mut model = Model::init(&cfg);
        let before = model.params.clone();
        let g = GroundingConfig { epochs: 4, ..GroundingConfig::default() };
        let curve = ground_provider(&mut model, &g, &scenes, 9, crate::Exec::Sequential).unwrap();
        assert_eq!(curve.len(), 4);
        assert!(curve[3] < curve[0], "{curve:?}");
        for (name, t) in model.params.iter() {
            let changed = t != before.get(name).unwrap();
            assert_eq!(changed, PROVIDER_PARAMS.contains(&name.as_str()), "{name}");
        }
        let skip = GroundingConfig { epochs: 0, ..g };
        assert!(ground_provider(&mut model, &skip, &scenes, 9, crate::Exec::Sequential).unwrap().is_empty());
    }
}
