//! Synthetic grid-world scenes with exact predicate semantics, rendering to
//! image tensors, and balanced dataset generation.

mod generate;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numcore::Tensor;
use crate::oracle::PredicateName;

pub use generate::{
    dataset_digest, default_manifest, fewshot_subset, generate_dataset, load_dataset, propose_scene, save_dataset,
    split_states, Dataset, DatasetManifest, StateSpec,
};

pub const GRID: i32 = 8;
pub const SCALE: usize = 4;
pub const RENDER_SIZE: usize = GRID as usize * SCALE;
pub const CHANNELS: usize = 10;
pub const OPEN_CHANNEL: usize = 8;
pub const POWER_CHANNEL: usize = 9;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("no {0} in scene")]
    MissingObject(Category),
    #[error("more than one {0} in scene")]
    AmbiguousObject(Category),
    #[error("unknown predicate `{0}`")]
    UnknownPredicate(String),
    #[error("predicate `{0}` takes {1} object(s)")]
    Arity(String, usize),
    #[error("invalid query {0}: {1}")]
    InvalidQuery(String, String),
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("unknown category `{0}`")]
    UnknownCategory(String),
    #[error("state {state}: quota unmet after {attempts} attempts ({positives} true, {negatives} false accepted)")]
    Quota { state: String, attempts: u64, positives: usize, negatives: usize },
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("{path}: {msg}")]
    Format { path: String, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Cup,
    Plate,
    BlockRed,
    BlockBlue,
    Cabinet,
    Microwave,
    Lamp,
    Box,
}

impl Category {
    pub const ALL: [Category; 8] = [
        Category::Cup,
        Category::Plate,
        Category::BlockRed,
        Category::BlockBlue,
        Category::Cabinet,
        Category::Microwave,
        Category::Lamp,
        Category::Box,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Category::Cup => "cup",
            Category::Plate => "plate",
            Category::BlockRed => "block_red",
            Category::BlockBlue => "block_blue",
            Category::Cabinet => "cabinet",
            Category::Microwave => "microwave",
            Category::Lamp => "lamp",
            Category::Box => "box",
        }
    }

    pub fn from_name(s: &str) -> Result<Self, SceneError> {
        Category::ALL.into_iter().find(|c| c.name() == s).ok_or_else(|| SceneError::UnknownCategory(s.to_string()))
    }

    /// Occupancy channel of the rendering.
    pub fn channel(self) -> usize {
        self as usize
    }

    pub fn is_container(self) -> bool {
        matches!(self, Category::Cabinet | Category::Microwave | Category::Box)
    }

    /// Objects small enough to sit inside a container.
    pub fn is_small(self) -> bool {
        matches!(self, Category::Cup | Category::BlockRed | Category::BlockBlue)
    }

    /// Footprint `(w, h)` in grid cells.
    pub fn size(self) -> (i32, i32) {
        match self {
            Category::Cup | Category::BlockRed | Category::BlockBlue => (1, 1),
            Category::Plate => (2, 1),
            Category::Lamp => (1, 2),
            Category::Cabinet | Category::Microwave | Category::Box => (3, 3),
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Cell rectangle; `y` grows downward.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x: i32,
    pub y: i32,
    pub w: i32,
    pub h: i32,
}

impl Rect {
    pub fn new(x: i32, y: i32, w: i32, h: i32) -> Self {
        Rect { x, y, w, h }
    }

    pub fn right(&self) -> i32 {
        self.x + self.w
    }

    pub fn bottom(&self) -> i32 {
        self.y + self.h
    }

    pub fn in_grid(&self) -> bool {
        self.w >= 1 && self.h >= 1 && self.x >= 0 && self.y >= 0 && self.right() <= GRID && self.bottom() <= GRID
    }

    /// Empty cells between the rectangles along x; negative values count
    /// overlapping columns.
    pub fn gap_x(&self, o: &Rect) -> i32 {
        self.x.max(o.x) - self.right().min(o.right())
    }

    pub fn gap_y(&self, o: &Rect) -> i32 {
        self.y.max(o.y) - self.bottom().min(o.bottom())
    }

    pub fn overlaps(&self, o: &Rect) -> bool {
        self.gap_x(o) < 0 && self.gap_y(o) < 0
    }

    pub fn strictly_inside(&self, o: &Rect) -> bool {
        self.x > o.x && self.y > o.y && self.right() < o.right() && self.bottom() < o.bottom()
    }

    /// Twice the centre x coordinate, kept integral.
    fn center2_x(&self) -> i32 {
        2 * self.x + self.w
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneObject {
    pub id: u32,
    pub category: Category,
    pub rect: Rect,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub open_state: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub power_state: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contained_in: Option<u32>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scene {
    pub objects: Vec<SceneObject>,
    pub seed: u64,
}

impl Scene {
    pub fn find(&self, c: Category) -> Result<&SceneObject, SceneError> {
        let mut it = self.objects.iter().filter(|o| o.category == c);
        let first = it.next().ok_or(SceneError::MissingObject(c))?;
        match it.next() {
            Some(_) => Err(SceneError::AmbiguousObject(c)),
            None => Ok(first),
        }
    }

    fn by_id(&self, id: u32) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.id == id)
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |m: String| Err(SceneError::InvalidScene(m));
        for (i, o) in self.objects.iter().enumerate() {
            if self.objects[..i].iter().any(|p| p.id == o.id) {
                return bad(format!("duplicate id {}", o.id));
            }
            if !o.rect.in_grid() {
                return bad(format!("{} outside the grid", o.category));
            }
            if o.open_state.is_some() != o.category.is_container() {
                return bad(format!("{} open state", o.category));
            }
            if o.power_state.is_some() != (o.category == Category::Lamp) {
                return bad(format!("{} power state", o.category));
            }
            if let Some(cid) = o.contained_in {
                let Some(c) = self.by_id(cid) else { return bad(format!("{} in missing container", o.category)) };
                if !c.category.is_container() || c.contained_in.is_some() || !o.rect.strictly_inside(&c.rect) {
                    return bad(format!("{} not strictly inside {}", o.category, c.category));
                }
            }
        }
        for (i, a) in self.objects.iter().enumerate() {
            for b in &self.objects[i + 1..] {
                let nested = a.contained_in == Some(b.id) || b.contained_in == Some(a.id);
                if !nested && a.rect.overlaps(&b.rect) {
                    return bad(format!("{} overlaps {}", a.category, b.category));
                }
            }
        }
        Ok(())
    }
}

/// A `(predicate, objects)` question about a scene.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Query {
    pub predicate: PredicateName,
    pub obj1: Category,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub obj2: Option<Category>,
}

pub const UNARY_PREDICATES: [&str; 4] = ["Open", "Closed", "TurnedOn", "TurnedOff"];
pub const BINARY_PREDICATES: [&str; 8] =
    ["Touching", "NextTo", "OnLeft", "OnRight", "OnTop", "Under", "Inside", "Contains"];

pub fn arity(predicate: &str) -> Result<usize, SceneError> {
    if UNARY_PREDICATES.contains(&predicate) {
        Ok(1)
    } else if BINARY_PREDICATES.contains(&predicate) {
        Ok(2)
    } else {
        Err(SceneError::UnknownPredicate(predicate.to_string()))
    }
}

impl Query {
    pub fn unary(predicate: &str, obj1: Category) -> Self {
        Query { predicate: crate::oracle::pred(predicate), obj1, obj2: None }
    }

    pub fn binary(predicate: &str, obj1: Category, obj2: Category) -> Self {
        Query { predicate: crate::oracle::pred(predicate), obj1, obj2: Some(obj2) }
    }

    /// The queried object names, for mask conditioning.
    pub fn objects(&self) -> Vec<Category> {
        std::iter::once(self.obj1).chain(self.obj2).collect()
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        let p = self.predicate.as_str();
        let n = arity(p)?;
        if n != 1 + self.obj2.is_some() as usize {
            return Err(SceneError::Arity(p.to_string(), n));
        }
        let invalid = |m: &str| Err(SceneError::InvalidQuery(self.to_string(), m.to_string()));
        match p {
            "Open" | "Closed" if !self.obj1.is_container() => invalid("needs a container"),
            "TurnedOn" | "TurnedOff" if self.obj1 != Category::Lamp => invalid("needs the lamp"),
            _ if self.obj2 == Some(self.obj1) => invalid("objects must differ"),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for Query {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.obj2 {
            Some(o2) => write!(f, "{}({}, {})", self.predicate, self.obj1, o2),
            None => write!(f, "{}({})", self.predicate, self.obj1),
        }
    }
}

/// Natural-language form used in oracle prompts.
pub fn query_text(q: &Query) -> String {
    match q.obj2 {
        Some(o2) => format!("Is the {} {} the {}", q.obj1, q.predicate, o2),
        None => format!("Is the {} {}", q.obj1, q.predicate),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Id,
    OodUnseenCombo,
    OodNovelPred,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub scene: Scene,
    pub query: Query,
    pub label: bool,
    pub split_tag: SplitTag,
}

fn touching(a: &Rect, b: &Rect) -> bool {
    a.gap_x(b) <= 0 && a.gap_y(b) <= 0
}

fn next_to(a: &Rect, b: &Rect) -> bool {
    (0..=1).contains(&a.gap_x(b)) && a.gap_y(b) <= -1
}

fn on_top(a: &Rect, b: &Rect) -> bool {
    a.bottom() == b.y && a.gap_x(b) <= -1
}

/// Ground-truth value of `query` in `scene`.
pub fn eval_predicate(scene: &Scene, query: &Query) -> Result<bool, SceneError> {
    query.validate()?;
    let o1 = scene.find(query.obj1)?;
    let o2 = match query.obj2 {
        Some(c) => Some(scene.find(c)?),
        None => None,
    };
    let flag =
        |v: Option<bool>| v.ok_or_else(|| SceneError::InvalidQuery(query.to_string(), "object lacks the state".into()));
    let (a, b) = (&o1.rect, o2.map(|o| &o.rect));
    let two = || (a, b.expect("binary predicate has obj2"));
    Ok(match query.predicate.as_str() {
        "Open" => flag(o1.open_state)?,
        "Closed" => !flag(o1.open_state)?,
        "TurnedOn" => flag(o1.power_state)?,
        "TurnedOff" => !flag(o1.power_state)?,
        "Touching" => {
            let (a, b) = two();
            touching(a, b)
        }
        "NextTo" => {
            let (a, b) = two();
            next_to(a, b)
        }
        "OnLeft" => {
            let (a, b) = two();
            next_to(a, b) && a.center2_x() < b.center2_x()
        }
        "OnRight" => {
            let (a, b) = two();
            next_to(a, b) && a.center2_x() > b.center2_x()
        }
        "OnTop" => {
            let (a, b) = two();
            on_top(a, b)
        }
        "Under" => {
            let (a, b) = two();
            on_top(b, a)
        }
        "Inside" => o1.contained_in == o2.map(|o| o.id),
        "Contains" => o2.and_then(|o| o.contained_in) == Some(o1.id),
        p => return Err(SceneError::UnknownPredicate(p.to_string())),
    })
}

/// Renders a scene to a `32×32×10` tensor: one occupancy channel per
/// category, then openness and power footprints.
pub fn render(scene: &Scene) -> Tensor {
    let mut data = vec![0.0; RENDER_SIZE * RENDER_SIZE * CHANNELS];
    let mut paint = |r: &Rect, ch: usize| {
        for py in r.y as usize * SCALE..r.bottom() as usize * SCALE {
            for px in r.x as usize * SCALE..r.right() as usize * SCALE {
                data[(py * RENDER_SIZE + px) * CHANNELS + ch] = 1.0;
            }
        }
    };
    for o in &scene.objects {
        paint(&o.rect, o.category.channel());
        if o.open_state == Some(true) {
            paint(&o.rect, OPEN_CHANNEL);
        }
        if o.power_state == Some(true) {
            paint(&o.rect, POWER_CHANNEL);
        }
    }
    Tensor::new(vec![RENDER_SIZE, RENDER_SIZE, CHANNELS], data).expect("render shape")
}
