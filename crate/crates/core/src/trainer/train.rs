use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::losses::tape_ops as loss_ops;
use crate::numcore::{Tape, Tensor, Var};
use crate::oracle::{
    llm_relations, tree_relations, CommandTransport, PredicateName, PredicateTree, RelationCache, LLM_CMD_ENV,
};
use crate::par::{derive_seed, map_indexed};
use crate::scenes::{dataset_digest, fewshot_subset, query_text, Dataset, Example, Scene};

use super::grounding::ground_provider;
use super::metrics::MetricsReport;
use super::optim::{learning_rate, AdamHyper, AdamState};
use super::triplets::sample_triplets;
use super::{Checkpoint, Model, OracleMode, PreparedExample, RunConfig, TrainError};

const PHASE_TRAIN: u64 = 0;
const PHASE_ADAPT: u64 = 1;

/// Loss terms of one optimizer step, before weighting.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub sup: f64,
    pub trip: f64,
    pub reg: f64,
    pub total: f64,
    pub triplets: usize,
}

/// Step losses averaged over an epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub phase: String,
    pub epoch: usize,
    pub sup: f64,
    pub trip: f64,
    pub reg: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LrSchedule {
    /// Linear warmup over `warmup_epochs`, then cosine decay to zero.
    WarmupCosine {
        base: f64,
        warmup_epochs: usize,
    },
    Constant(f64),
}

impl LrSchedule {
    fn at(self, step: usize, total: usize, steps_per_epoch: usize) -> f64 {
        match self {
            LrSchedule::WarmupCosine { base, warmup_epochs } => {
                learning_rate(step, total, warmup_epochs * steps_per_epoch, base)
            }
            LrSchedule::Constant(lr) => lr,
        }
    }
}

fn hyper(cfg: &RunConfig) -> AdamHyper {
    AdamHyper { beta1: cfg.adam_beta1, beta2: cfg.adam_beta2, eps: cfg.adam_eps, weight_decay: cfg.weight_decay }
}

fn distinct_predicates<'a>(examples: impl Iterator<Item = &'a Example>) -> Vec<PredicateName> {
    examples.map(|e| e.query.predicate.clone()).collect::<BTreeSet<_>>().into_iter().collect()
}

/// Relation cache covering every predicate of the dataset, from the oracle
/// selected in the configuration.
pub fn build_relations(cfg: &RunConfig, dataset: &Dataset) -> Result<RelationCache, TrainError> {
    let preds = distinct_predicates(dataset.all_examples());
    match cfg.oracle.mode {
        OracleMode::Tree => Ok(tree_relations(&PredicateTree::default_tree(), &preds, cfg.seed)?),
        OracleMode::Cache => {
            let path = cfg
                .oracle
                .cache_path
                .as_ref()
                .ok_or_else(|| TrainError::Config("cache mode needs oracle.cache_path".into()))?;
            Ok(RelationCache::load(path)?)
        }
        OracleMode::Llm => {
            let path = cfg
                .oracle
                .cache_path
                .as_ref()
                .ok_or_else(|| TrainError::Config("llm mode needs oracle.cache_path".into()))?;
            let command = cfg
                .oracle
                .transport
                .clone()
                .or_else(|| std::env::var(LLM_CMD_ENV).ok())
                .ok_or_else(|| TrainError::Config(format!("llm mode needs oracle.transport or {LLM_CMD_ENV}")))?;
            let mut surface = BTreeMap::new();
            for e in dataset.all_examples() {
                surface.entry(e.query.predicate.clone()).or_insert_with(|| query_text(&e.query));
            }
            Ok(llm_relations(&preds, &surface, &CommandTransport::new(command), path, cfg.seed, cfg.exec)?)
        }
    }
}

struct Forward<'p> {
    tape: Tape<'p>,
    bound: crate::numcore::BoundParams,
    h: Var,
    bce: Var,
}

fn mean_of(t: &mut Tape<'_>, terms: &[Var]) -> Var {
    let mut acc = terms[0];
    for &v in &terms[1..] {
        acc = t.add(acc, v);
    }
    t.affine(acc, 1.0 / terms.len() as f64, 0.0)
}

fn non_finite(term: &'static str, x: f64) -> Result<(), &'static str> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(term)
    }
}

/// Loss and parameter gradients for one batch.
///
/// Per-example tapes are recorded in parallel; the triplet and norm terms
/// are recorded on a separate tape whose leaves are the batch's head
/// outputs, and their adjoints are fed back into the per-example sweeps.
#[allow(clippy::type_complexity)]
fn batch_gradients(
    model: &Model,
    cfg: &RunConfig,
    relations: &RelationCache,
    batch: &[&PreparedExample],
    rng: &mut ChaCha8Rng,
) -> Result<Result<(StepLosses, BTreeMap<String, Tensor>), &'static str>, TrainError> {
    let n = batch.len();
    let params = &model.params;
    let fwd: Vec<Forward<'_>> = map_indexed(cfg.exec, n, |i| {
        let mut tape = Tape::new();
        let bound = tape.bind(params);
        let (h, logit) = model.forward(&mut tape, &bound, batch[i]);
        let bce = tape.bce_logits(logit, if batch[i].label { 1.0 } else { 0.0 });
        Forward { tape, bound, h, bce }
    });
    let mut losses =
        StepLosses { sup: fwd.iter().map(|f| f.tape.scalar(f.bce)).sum::<f64>() / n as f64, ..StepLosses::default() };
    if let Err(term) = non_finite("supervised", losses.sup) {
        return Ok(Err(term));
    }

    let mut h_grads: Vec<Option<Tensor>> = vec![None; n];
    if cfg.uses_triplet() || cfg.uses_norm_reg() {
        let tags: Vec<PredicateName> = batch.iter().map(|e| e.predicate.clone()).collect();
        let triplets = sample_triplets(&tags, relations, rng, cfg.max_triplets)?;
        if !triplets.is_empty() {
            let w = &cfg.loss;
            let mut t = Tape::new();
            let hs: Vec<Var> = fwd.iter().map(|f| t.variable(f.tape.value(f.h).clone())).collect();
            let mut ssl = Vec::new();
            if cfg.uses_triplet() {
                let terms: Vec<Var> = triplets
                    .iter()
                    .map(|s| {
                        loss_ops::triplet(
                            &mut t,
                            hs[s.anchor],
                            hs[s.positive],
                            hs[s.negative],
                            w.lambda_margin,
                            model.geometry,
                        )
                    })
                    .collect();
                let trip = mean_of(&mut t, &terms);
                losses.trip = t.scalar(trip);
                ssl.push(t.affine(trip, w.alpha, 0.0));
            }
            if cfg.uses_norm_reg() {
                let terms: Vec<Var> = triplets
                    .iter()
                    .map(|s| {
                        let [a, b, c] = s.ranked;
                        loss_ops::norm_reg(&mut t, hs[a], hs[b], hs[c], w.gamma_margin)
                    })
                    .collect();
                let reg = mean_of(&mut t, &terms);
                losses.reg = t.scalar(reg);
                ssl.push(t.affine(reg, w.beta, 0.0));
            }
            if let Err(term) = non_finite("triplet", losses.trip).and(non_finite("norm_reg", losses.reg)) {
                return Ok(Err(term));
            }
            let total = if ssl.len() == 2 { t.add(ssl[0], ssl[1]) } else { ssl[0] };
            let mut g = t.backward(total);
            h_grads = hs.iter().map(|&v| g.take(v)).collect();
            losses.triplets = triplets.len();
        }
    }
    losses.total = crate::losses::total_loss(losses.sup, losses.trip, losses.reg, &cfg.loss);

    let per_example = map_indexed(cfg.exec, n, |i| {
        let f = &fwd[i];
        let mut seeds = vec![(f.bce, Tensor::filled(f.tape.value(f.bce).shape(), 1.0 / n as f64))];
        if let Some(g) = &h_grads[i] {
            seeds.push((f.h, g.clone()));
        }
        f.tape.backward_with(&seeds).params(&f.bound, params)
    });
    let mut grads = BTreeMap::new();
    for g in per_example {
        for (name, t) in g {
            match grads.get_mut(&name) {
                None => {
                    grads.insert(name, t);
                }
                Some(acc) => Tensor::add_assign(acc, &t),
            }
        }
    }
    Ok(Ok((losses, grads)))
}

/// Runs `epochs` epochs of minibatch training on `examples`.
///
/// `phase` separates the random streams of training and adaptation;
/// `first_epoch` numbers the epochs in diagnostics and the loss curve.
#[allow(clippy::too_many_arguments)]
pub fn train_on(
    model: &mut Model,
    adam: &mut AdamState,
    cfg: &RunConfig,
    relations: &RelationCache,
    examples: &[PreparedExample],
    epochs: usize,
    schedule: LrSchedule,
    phase: u64,
) -> Result<Vec<EpochLoss>, TrainError> {
    if examples.is_empty() {
        return Err(TrainError::EmptySplit(if phase == PHASE_ADAPT { "fewshot" } else { "train" }.into()));
    }
    let steps_per_epoch = examples.len().div_ceil(cfg.batch_size);
    let total = epochs * steps_per_epoch;
    let h = hyper(cfg);
    let name = if phase == PHASE_ADAPT { "adapt" } else { "train" };
    let mut curve = Vec::with_capacity(epochs);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    for epoch in 0..epochs {
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[phase, epoch as u64, 0])));
        let mut triplet_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[phase, epoch as u64, 1]));
        let mut sum = StepLosses::default();
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&PreparedExample> = chunk.iter().map(|&i| &examples[i]).collect();
            let (losses, grads) = batch_gradients(model, cfg, relations, &batch, &mut triplet_rng)?
                .map_err(|term| TrainError::NonFinite { term, epoch, step })?;
            let lr = schedule.at(epoch * steps_per_epoch + step, total, steps_per_epoch);
            adam.update(&mut model.params, &grads, lr, h);
            model.project_biases();
            sum.sup += losses.sup;
            sum.trip += losses.trip;
            sum.reg += losses.reg;
            sum.total += losses.total;
        }
        let k = steps_per_epoch as f64;
        let e = EpochLoss {
            phase: name.into(),
            epoch,
            sup: sum.sup / k,
            trip: sum.trip / k,
            reg: sum.reg / k,
            total: sum.total / k,
        };
        log::debug!("{name} epoch {epoch}: total {:.4} sup {:.4} trip {:.4} reg {:.4}", e.total, e.sup, e.trip, e.reg);
        curve.push(e);
    }
    Ok(curve)
}

/// Trains from scratch on the dataset's training split and evaluates on the
/// ID and OOD test splits.
pub fn train(cfg: &RunConfig, dataset: &Dataset) -> Result<(Checkpoint, MetricsReport), TrainError> {
    let relations = build_relations(cfg, dataset)?;
    train_with_relations(cfg, dataset, &relations)
}

pub(crate) fn train_with_relations(
    cfg: &RunConfig,
    dataset: &Dataset,
    relations: &RelationCache,
) -> Result<(Checkpoint, MetricsReport), TrainError> {
    cfg.validate()?;
    for w in cfg.warnings() {
        log::warn!("{w}");
    }
    let mut model = Model::init(cfg);
    if model.use_mask {
        let scenes: Vec<&Scene> = dataset.train.iter().map(|e| &e.scene).collect();
        let curve = ground_provider(&mut model, &cfg.grounding, &scenes, derive_seed(cfg.seed, &[3]), cfg.exec)?;
        log::info!("provider grounding loss per epoch: {curve:?}");
    }
    let train_set = model.prepare_all(&dataset.train)?;
    let mut adam = AdamState::new(&model.params);
    let schedule = LrSchedule::WarmupCosine { base: cfg.lr, warmup_epochs: cfg.warmup_epochs };
    let curve = train_on(&mut model, &mut adam, cfg, relations, &train_set, cfg.epochs, schedule, PHASE_TRAIN)?;
    let ckpt = Checkpoint {
        config: cfg.clone(),
        params: model.params,
        adam,
        epoch: cfg.epochs,
        rng_seed: cfg.seed,
        trained_predicates: distinct_predicates(dataset.train.iter()),
        loss_curve: curve,
        dataset_digest: Some(dataset_digest(dataset)),
    };
    let report = evaluate(&ckpt, &test_examples(dataset))?;
    Ok((ckpt, report))
}

pub fn test_examples(dataset: &Dataset) -> Vec<Example> {
    dataset.test_id.iter().chain(&dataset.test_ood).cloned().collect()
}

/// Continues training every parameter on `shots` examples per label of each
/// novel state, with the same optimizer state and a constant learning rate.
pub fn adapt_few_shot(
    ckpt: &Checkpoint,
    pool: &[Example],
    shots: usize,
    epochs: usize,
    relations: &RelationCache,
) -> Result<Checkpoint, TrainError> {
    if shots == 0 || epochs == 0 {
        return Ok(ckpt.clone());
    }
    let shot_set = fewshot_subset(pool, shots)?;
    let novel = distinct_predicates(shot_set.iter());
    if let Some(p) = novel.iter().find(|p| ckpt.trained_predicates.contains(p)) {
        return Err(TrainError::Config(format!("few-shot predicate {p} was already trained")));
    }
    let cfg = &ckpt.config;
    let mut model = ckpt.model();
    let prepared = model.prepare_all(&shot_set)?;
    let mut adam = ckpt.adam.clone();
    let lr = cfg.fewshot.lr.unwrap_or(cfg.lr);
    let curve =
        train_on(&mut model, &mut adam, cfg, relations, &prepared, epochs, LrSchedule::Constant(lr), PHASE_ADAPT)?;
    let mut out = ckpt.clone();
    out.params = model.params;
    out.adam = adam;
    out.epoch += epochs;
    out.loss_curve.extend(curve);
    Ok(out)
}

pub fn predict_logits(model: &Model, examples: &[PreparedExample], exec: crate::par::Exec) -> Vec<f64> {
    map_indexed(exec, examples.len(), |i| model.infer(&examples[i]).1)
}

pub fn evaluate(ckpt: &Checkpoint, examples: &[Example]) -> Result<MetricsReport, TrainError> {
    if examples.is_empty() {
        return Err(TrainError::EmptySplit("evaluation".into()));
    }
    let model = ckpt.model();
    let prepared = model.prepare_all(examples)?;
    let logits = predict_logits(&model, &prepared, ckpt.config.exec);
    Ok(MetricsReport::from_logits(&prepared, &logits, ckpt.loss_curve.clone()))
}
