use crate::encoder::{self, trigram_features, EncoderDims, EncoderVars};
use crate::hypnet::{self, Geometry, HeadDims, HeadVars, L1_BIAS, L2_BIAS};
use crate::numcore::{BoundParams, ParamStore, Tape, Tensor, Var};
use crate::oracle::PredicateName;
use crate::par::derive_seed;
use crate::poincare::{project, MAX_NORM};
use crate::scenes::{query_text, render, Example, Scene, SplitTag};

use super::{RunConfig, TrainError};

/// All learnable tensors plus the switches that decide how they are used.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub params: ParamStore,
    pub encoder: EncoderDims,
    pub head: HeadDims,
    pub geometry: Geometry,
    pub use_mask: bool,
}

/// An example with its conditioning features precomputed; the image is
/// rendered on demand.
#[derive(Clone, Debug)]
pub struct PreparedExample {
    pub scene: Scene,
    pub objects: Vec<Tensor>,
    pub text: Tensor,
    pub label: bool,
    pub predicate: PredicateName,
    pub state: String,
    pub split_tag: SplitTag,
}

impl Model {
    pub fn init(cfg: &RunConfig) -> Model {
        let mut params = ParamStore::new();
        encoder::init_params(&cfg.encoder, derive_seed(cfg.seed, &[1]), &mut params);
        let head_seed = derive_seed(cfg.seed, &[2]);
        let head = match cfg.geometry() {
            Geometry::Hyperbolic => hypnet::init_params(cfg.head, head_seed),
            Geometry::Euclidean => hypnet::init_euclidean_params(cfg.head, head_seed),
        };
        head.to_store(&mut params);
        Model::from_params(cfg, params)
    }

    pub fn from_params(cfg: &RunConfig, params: ParamStore) -> Model {
        Model {
            params,
            encoder: cfg.encoder,
            head: cfg.head,
            geometry: cfg.geometry(),
            use_mask: !cfg.ablation.no_object_mask,
        }
    }

    /// Without the object mask the predicate text is the whole query, so the
    /// model still learns which objects are meant.
    pub fn prepare(&self, e: &Example) -> Result<PreparedExample, TrainError> {
        let objects = e.query.objects().iter().map(|c| trigram_features(c.name())).collect::<Result<_, _>>()?;
        let text = if self.use_mask {
            trigram_features(e.query.predicate.as_str())?
        } else {
            trigram_features(&query_text(&e.query))?
        };
        Ok(PreparedExample {
            scene: e.scene.clone(),
            objects,
            text,
            label: e.label,
            predicate: e.query.predicate.clone(),
            state: e.query.to_string(),
            split_tag: e.split_tag,
        })
    }

    pub fn prepare_all(&self, examples: &[Example]) -> Result<Vec<PreparedExample>, TrainError> {
        examples.iter().map(|e| self.prepare(e)).collect()
    }

    /// Records the joint representation, head output `h` and logit.
    pub fn forward<'p>(&self, t: &mut Tape<'p>, bound: &BoundParams, ex: &'p PreparedExample) -> (Var, Var) {
        let ev = EncoderVars::from_bound(bound);
        let hv = HeadVars::from_bound(bound);
        let image = t.constant(render(&ex.scene));
        let objects: Vec<Var> = ex.objects.iter().map(|o| t.constant_ref(o)).collect();
        let text = t.constant_ref(&ex.text);
        let e = encoder::tape_ops::joint_rep(t, &ev, &self.encoder, image, &objects, text, self.use_mask);
        let h = hypnet::tape_ops::hyp_encode(t, &hv, e, self.geometry);
        let logit = hypnet::tape_ops::classify(t, &hv, h, self.geometry);
        (h, logit)
    }

    /// Head output and logit without recording gradients.
    pub fn infer(&self, ex: &PreparedExample) -> (Tensor, f64) {
        let mut t = Tape::new();
        let bound = t.bind(&self.params);
        let (h, logit) = self.forward(&mut t, &bound, ex);
        (t.value(h).clone(), t.scalar(logit))
    }

    /// Pulls ball-valued biases back inside the ball after an update.
    pub fn project_biases(&mut self) {
        if self.geometry != Geometry::Hyperbolic {
            return;
        }
        for name in [L1_BIAS, L2_BIAS] {
            if let Some(b) = self.params.get_mut(name) {
                if b.norm() > MAX_NORM {
                    let p = project(b.data()).expect("finite bias");
                    b.data_mut().copy_from_slice(p.coords());
                }
            }
        }
    }
}
