//! Binary checkpoint: magic, version byte, little-endian manifest length,
//! JSON manifest, then every tensor as raw little-endian f64.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::numcore::{ParamStore, Tensor};
use crate::oracle::PredicateName;

use super::{AdamState, EpochLoss, Model, RunConfig, TrainError};

pub const CHECKPOINT_MAGIC: &[u8; 9] = b"PHIERCKPT";
pub const CHECKPOINT_VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub params: ParamStore,
    pub adam: AdamState,
    /// Epochs completed, adaptation included.
    pub epoch: usize,
    /// Seed from which every random stream of the run is derived.
    pub rng_seed: u64,
    pub trained_predicates: Vec<PredicateName>,
    pub loss_curve: Vec<EpochLoss>,
    pub dataset_digest: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    group: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: RunConfig,
    epoch: usize,
    rng_seed: u64,
    adam_step: u64,
    trained_predicates: Vec<PredicateName>,
    loss_curve: Vec<EpochLoss>,
    dataset_digest: Option<String>,
    tensors: Vec<TensorEntry>,
}

const GROUPS: [&str; 3] = ["param", "adam_m", "adam_v"];

impl Checkpoint {
    pub fn model(&self) -> Model {
        Model::from_params(&self.config, self.params.clone())
    }

    fn stores(&self) -> [&ParamStore; 3] {
        [&self.params, &self.adam.m, &self.adam.v]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut tensors = Vec::new();
        let mut blob = Vec::new();
        let mut offset = 0;
        for (group, store) in GROUPS.iter().zip(self.stores()) {
            for (name, t) in store.iter() {
                tensors.push(TensorEntry {
                    name: name.clone(),
                    group: group.to_string(),
                    shape: t.shape().to_vec(),
                    offset,
                });
                for x in t.data() {
                    blob.extend_from_slice(&x.to_le_bytes());
                }
                offset += t.len();
            }
        }
        let manifest = Manifest {
            config: self.config.clone(),
            epoch: self.epoch,
            rng_seed: self.rng_seed,
            adam_step: self.adam.step,
            trained_predicates: self.trained_predicates.clone(),
            loss_curve: self.loss_curve.clone(),
            dataset_digest: self.dataset_digest.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(CHECKPOINT_MAGIC.len() + 9 + json.len() + blob.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.push(CHECKPOINT_VERSION);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&blob);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TrainError> {
        let bad = |m: String| TrainError::Checkpoint(m);
        let rest = bytes.strip_prefix(CHECKPOINT_MAGIC.as_slice()).ok_or_else(|| bad("bad magic".into()))?;
        let (&version, rest) = rest.split_first().ok_or_else(|| bad("truncated header".into()))?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        if rest.len() < 8 {
            return Err(bad("truncated header".into()));
        }
        let (len, rest) = rest.split_at(8);
        let len = u64::from_le_bytes(len.try_into().expect("8 bytes")) as usize;
        if rest.len() < len {
            return Err(bad("truncated manifest".into()));
        }
        let (json, blob) = rest.split_at(len);
        let manifest: Manifest = serde_json::from_slice(json).map_err(|e| bad(format!("manifest: {e}")))?;
        if blob.len() % 8 != 0 {
            return Err(bad("tensor blob is not a whole number of f64".into()));
        }
        let values: Vec<f64> =
            blob.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let mut stores = [ParamStore::new(), ParamStore::new(), ParamStore::new()];
        for e in manifest.tensors {
            let n: usize = e.shape.iter().product();
            let data = values
                .get(e.offset..e.offset + n)
                .ok_or_else(|| bad(format!("tensor `{}` runs past the blob", e.name)))?;
            let g =
                GROUPS.iter().position(|g| *g == e.group).ok_or_else(|| bad(format!("unknown group `{}`", e.group)))?;
            stores[g].insert(e.name, Tensor::new(e.shape, data.to_vec())?);
        }
        let [params, m, v] = stores;
        if m.names().ne(params.names()) || v.names().ne(params.names()) {
            return Err(bad("optimizer moments do not match the parameters".into()));
        }
        Ok(Checkpoint {
            config: manifest.config,
            params,
            adam: AdamState { step: manifest.adam_step, m, v },
            epoch: manifest.epoch,
            rng_seed: manifest.rng_seed,
            trained_predicates: manifest.trained_predicates,
            loss_curve: manifest.loss_curve,
            dataset_digest: manifest.dataset_digest,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&self.to_bytes())?;
        f.sync_all()?;
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        Checkpoint::from_bytes(&fs::read(path)?)
    }
}
