//! Training, few-shot adaptation, evaluation, ablations and checkpoints.

mod ablation;
mod checkpoint;
mod export;
mod grounding;
mod hierarchy;
mod metrics;
mod model;
mod optim;
mod train;
mod triplets;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{EncoderDims, EncoderError};
use crate::hypnet::{HeadDims, HypError};
use crate::losses::{LossError, LossWeights};
use crate::numcore::TensorError;
use crate::oracle::OracleError;
use crate::par::Exec;
use crate::scenes::SceneError;

pub use ablation::{ladder_table, ladder_variants, run_ablation_ladder, LadderRow};
pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use export::{export_embeddings, write_svg, EmbeddingRow};
pub use grounding::{ground_provider, GroundingConfig, PROVIDER_PARAMS};
pub use hierarchy::{
    embed_tree, parent_child_order, triplet_order, TreeEmbedding, TreeEmbeddingConfig, TreeEmbeddingReport,
};
pub use metrics::{GroupAccuracy, MetricsReport, StateAccuracy};
pub use model::{Model, PreparedExample};
pub use optim::{learning_rate, AdamState};
pub use train::{
    adapt_few_shot, build_relations, evaluate, predict_logits, test_examples, train, train_on, EpochLoss, LrSchedule,
    StepLosses,
};
pub use triplets::{sample_triplets, SampledTriplet};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite {term} loss at epoch {epoch}, step {step}")]
    NonFinite { term: &'static str, epoch: usize, step: usize },
    #[error("empty split `{0}`")]
    EmptySplit(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Hyp(#[from] HypError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    /// Feed the unmasked image and condition on the full query text.
    pub no_object_mask: bool,
    pub no_triplet: bool,
    pub no_norm_reg: bool,
    /// Euclidean MLP head and Euclidean triplet distance.
    pub euclidean_metric: bool,
}

impl Ablation {
    pub fn supervised_only() -> Self {
        Ablation { no_object_mask: true, no_triplet: true, no_norm_reg: true, euclidean_metric: true }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleMode {
    #[default]
    Tree,
    Llm,
    Cache,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleConfig {
    pub mode: OracleMode,
    /// Relation cache file, read in `cache` mode and filled in `llm` mode.
    pub cache_path: Option<PathBuf>,
    /// Transport command for `llm` mode; falls back to `PHIER_LLM_CMD`.
    pub transport: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FewShotConfig {
    pub shots: usize,
    pub epochs: usize,
    /// Learning rate for adaptation; the training rate when unset.
    pub lr: Option<f64>,
}

impl Default for FewShotConfig {
    fn default() -> Self {
        FewShotConfig { shots: 5, epochs: 20, lr: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub loss: LossWeights,
    /// Triplets sampled per step.
    pub max_triplets: usize,
    pub encoder: EncoderDims,
    pub head: HeadDims,
    pub ablation: Ablation,
    pub oracle: OracleConfig,
    pub fewshot: FewShotConfig,
    pub grounding: GroundingConfig,
    /// Dataset directory for the CLI.
    pub data_dir: Option<PathBuf>,
    pub exec: Exec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            batch_size: 32,
            epochs: 50,
            lr: 1e-4,
            weight_decay: 0.01,
            warmup_epochs: 5,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            loss: LossWeights::default(),
            max_triplets: 64,
            encoder: EncoderDims::default(),
            head: HeadDims::default(),
            ablation: Ablation::default(),
            oracle: OracleConfig::default(),
            fewshot: FewShotConfig::default(),
            grounding: GroundingConfig::default(),
            data_dir: None,
            exec: Exec::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || self.adam_eps <= 0.0 {
            return bad("adam parameters out of range");
        }
        if self.fewshot.lr.is_some_and(|l| !(l.is_finite() && l > 0.0)) {
            return bad("fewshot.lr must be positive");
        }
        self.loss.validate()?;
        self.encoder.validate()?;
        if self.encoder.joint != self.head.input {
            return bad("encoder.joint must equal head.input");
        }
        if self.head.hidden == 0 || self.head.output == 0 {
            return bad("head sizes must be positive");
        }
        Ok(())
    }

    /// Non-fatal configuration problems, such as norm margins that cannot
    /// fit inside the ball for the default hierarchy depth.
    pub fn warnings(&self) -> Vec<String> {
        let tree = crate::oracle::PredicateTree::default_tree();
        let depth = tree.nodes().iter().filter_map(|n| tree.depth(n).ok()).max().unwrap_or(0);
        self.loss.feasibility_warning(depth).into_iter().collect()
    }

    pub fn geometry(&self) -> crate::hypnet::Geometry {
        if self.ablation.euclidean_metric {
            crate::hypnet::Geometry::Euclidean
        } else {
            crate::hypnet::Geometry::Hyperbolic
        }
    }

    pub fn uses_triplet(&self) -> bool {
        !self.ablation.no_triplet
    }

    pub fn uses_norm_reg(&self) -> bool {
        !self.ablation.no_norm_reg
    }
}
