//! Embedding a predicate tree directly, with free points trained only by the
//! triplet and norm losses.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::hypnet::Geometry;
use crate::losses::{tape_ops as loss_ops, LossWeights};
use crate::numcore::{ParamStore, Tape, Tensor, Var};
use crate::oracle::{tree_relations, CacheEntry, PredicateName, PredicateTree};
use crate::par::derive_seed;
use crate::poincare::{distance, project, BallPoint, MAX_NORM};

use super::optim::{learning_rate, AdamHyper, AdamState};
use super::TrainError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TreeEmbeddingConfig {
    pub seed: u64,
    pub dim: usize,
    pub steps: usize,
    pub lr: f64,
    /// Oracle triples per step.
    pub batch: usize,
    /// Initial coordinates are uniform in `[-init_scale, init_scale]`.
    pub init_scale: f64,
    pub loss: LossWeights,
    /// Triples sampled for the report.
    pub eval_triplets: usize,
}

impl Default for TreeEmbeddingConfig {
    fn default() -> Self {
        TreeEmbeddingConfig {
            seed: 0,
            dim: 5,
            steps: 2000,
            lr: 0.01,
            batch: 64,
            init_scale: 1e-3,
            // Without a supervised term the triplet loss needs equal weight
            // and a margin the tree's distances can actually satisfy.
            loss: LossWeights { alpha: 1.0, lambda_margin: 0.5, ..LossWeights::default() },
            eval_triplets: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeEmbeddingReport {
    pub steps: usize,
    pub final_loss: f64,
    /// Fraction of sampled oracle triples with d(a, n) >= d(a, p).
    pub triplet_order: f64,
    /// The same fraction among triples whose tree distances differ, leaving
    /// out those the oracle decides by its name tie-break.
    pub triplet_order_strict: f64,
    /// Fraction of tree edges whose child has the larger norm.
    pub parent_child_order: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TreeEmbedding {
    pub points: BTreeMap<PredicateName, BallPoint>,
    pub report: TreeEmbeddingReport,
}

fn key(p: &PredicateName) -> String {
    format!("node.{p}")
}

/// Embeds every node of `tree` in the ball and reports how well distances
/// and norms follow the oracle.
pub fn embed_tree(tree: &PredicateTree, cfg: &TreeEmbeddingConfig) -> Result<TreeEmbedding, TrainError> {
    if cfg.dim == 0 || cfg.batch == 0 || cfg.lr.is_nan() || cfg.lr <= 0.0 {
        return Err(TrainError::Config("tree embedding needs positive dim, batch and lr".into()));
    }
    cfg.loss.validate()?;
    let nodes = tree.nodes().to_vec();
    let relations = tree_relations(tree, &nodes, cfg.seed)?;
    let entries: Vec<_> = relations.entries().collect();

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0]));
    let mut params = ParamStore::new();
    for n in &nodes {
        let v = (0..cfg.dim).map(|_| rng.random_range(-cfg.init_scale..=cfg.init_scale)).collect();
        params.insert(key(n), Tensor::vector(v));
    }
    let mut adam = AdamState::new(&params);
    let hyper = AdamHyper { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 };
    let mut final_loss = f64::NAN;
    for step in 0..cfg.steps {
        let picks = index::sample(&mut rng, entries.len(), cfg.batch.min(entries.len()));
        let mut t = Tape::new();
        let bound = t.bind(&params);
        let v = |n: &PredicateName| bound.get(&key(n));
        let mut terms: Vec<Var> = Vec::new();
        for i in picks {
            let e = entries[i];
            let trip = loss_ops::triplet(
                &mut t,
                v(&e.anchor),
                v(&e.positive),
                v(&e.negative),
                cfg.loss.lambda_margin,
                Geometry::Hyperbolic,
            );
            let trip = t.affine(trip, cfg.loss.alpha, 0.0);
            let reg = loss_ops::norm_reg(&mut t, v(&e.least), v(&e.middle), v(&e.most), cfg.loss.gamma_margin);
            let reg = t.affine(reg, cfg.loss.beta, 0.0);
            terms.push(t.add(trip, reg));
        }
        let mut total = terms[0];
        for &x in &terms[1..] {
            total = t.add(total, x);
        }
        let total = t.affine(total, 1.0 / terms.len() as f64, 0.0);
        final_loss = t.scalar(total);
        if !final_loss.is_finite() {
            return Err(TrainError::NonFinite { term: "tree embedding", epoch: 0, step });
        }
        let grads = t.backward(total).params(&bound, &params);
        drop(t);
        adam.update(&mut params, &grads, learning_rate(step, cfg.steps, 0, cfg.lr), hyper);
        for (_, p) in params.iter_mut() {
            if p.norm() > MAX_NORM {
                let q = project(p.data()).expect("finite point");
                p.data_mut().copy_from_slice(q.coords());
            }
        }
    }

    let points: BTreeMap<PredicateName, BallPoint> = nodes
        .iter()
        .map(|n| (n.clone(), project(params.get(&key(n)).expect("every node").data()).expect("finite point")))
        .collect();
    let informative: Vec<&CacheEntry> = entries
        .iter()
        .copied()
        .filter(|e| tree.distance(&e.anchor, &e.positive).ok() != tree.distance(&e.anchor, &e.negative).ok())
        .collect();
    let eval_seed = derive_seed(cfg.seed, &[1]);
    let report = TreeEmbeddingReport {
        steps: cfg.steps,
        final_loss,
        triplet_order: triplet_order(&points, &entries, cfg.eval_triplets, eval_seed),
        triplet_order_strict: triplet_order(&points, &informative, cfg.eval_triplets, eval_seed),
        parent_child_order: parent_child_order(tree, &points),
    };
    Ok(TreeEmbedding { points, report })
}

/// Fraction of `samples` oracle triples (drawn without replacement when
/// possible) whose negative is at least as far from the anchor as the positive.
pub fn triplet_order(
    points: &BTreeMap<PredicateName, BallPoint>,
    entries: &[&CacheEntry],
    samples: usize,
    seed: u64,
) -> f64 {
    if entries.is_empty() || samples == 0 {
        return 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<usize> = if samples <= entries.len() {
        index::sample(&mut rng, entries.len(), samples).into_vec()
    } else {
        (0..samples).map(|_| rng.random_range(0..entries.len())).collect()
    };
    let ok = picks
        .iter()
        .filter(|&&i| {
            let e = entries[i];
            let (a, p, n) = (&points[&e.anchor], &points[&e.positive], &points[&e.negative]);
            distance(a, n) >= distance(a, p)
        })
        .count();
    ok as f64 / picks.len() as f64
}

pub fn parent_child_order(tree: &PredicateTree, points: &BTreeMap<PredicateName, BallPoint>) -> f64 {
    let edges = tree.edges();
    let ok = edges.iter().filter(|(c, p)| points[*c].norm() > points[*p].norm()).count();
    ok as f64 / edges.len().max(1) as f64
}
