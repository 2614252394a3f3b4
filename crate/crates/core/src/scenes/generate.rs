//! Balanced dataset generation by rejection sampling, and dataset files.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{eval_predicate, Category, Example, Query, Rect, Scene, SceneError, SceneObject, SplitTag, GRID, SCALE};
use crate::par::{self, derive_seed, Exec};

/// Attempts evaluated per parallel chunk; acceptance happens in attempt order.
const CHUNK: u64 = 64;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateSpec {
    pub query: Query,
    pub split_tag: SplitTag,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateCount {
    pub split: String,
    pub state: String,
    pub positives: usize,
    pub negatives: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetManifest {
    pub seed: u64,
    pub states: Vec<StateSpec>,
    pub train_per_label: usize,
    pub test_per_label: usize,
    /// Labelled examples per novel state set aside for few-shot adaptation.
    pub fewshot_per_label: usize,
    pub max_attempts: u64,
    pub grid: i32,
    pub render_scale: usize,
    /// Filled in by generation.
    pub counts: Vec<StateCount>,
}

impl Default for DatasetManifest {
    fn default() -> Self {
        default_manifest(0)
    }
}

/// The default state split.
///
/// In-distribution states are trained and tested. Unseen combinations reuse
/// trained predicates on object pairs never seen with them in training;
/// novel states use predicates absent from training altogether.
pub fn default_manifest(seed: u64) -> DatasetManifest {
    use Category::*;
    let id = |q| StateSpec { query: q, split_tag: SplitTag::Id };
    let combo = |q| StateSpec { query: q, split_tag: SplitTag::OodUnseenCombo };
    let novel = |q| StateSpec { query: q, split_tag: SplitTag::OodNovelPred };
    let states = vec![
        id(Query::binary("NextTo", Cup, Plate)),
        id(Query::binary("OnLeft", BlockRed, BlockBlue)),
        id(Query::binary("OnTop", BlockRed, Box)),
        id(Query::binary("Inside", Cup, Cabinet)),
        id(Query::binary("Touching", Plate, BlockBlue)),
        id(Query::unary("Open", Cabinet)),
        id(Query::unary("TurnedOn", Lamp)),
        id(Query::binary("Under", Microwave, Cup)),
        combo(Query::binary("NextTo", BlockRed, Lamp)),
        combo(Query::binary("OnLeft", Cup, Plate)),
        combo(Query::binary("OnTop", BlockBlue, Microwave)),
        combo(Query::binary("Inside", BlockRed, Box)),
        combo(Query::binary("Touching", Cup, Lamp)),
        combo(Query::unary("Open", Microwave)),
        combo(Query::binary("Under", Cabinet, Plate)),
        novel(Query::binary("OnRight", BlockRed, BlockBlue)),
        novel(Query::unary("Closed", Cabinet)),
        novel(Query::unary("TurnedOff", Lamp)),
        novel(Query::binary("Contains", Cabinet, Cup)),
    ];
    DatasetManifest {
        seed,
        states,
        train_per_label: 100,
        test_per_label: 25,
        fewshot_per_label: 5,
        max_attempts: 1_000_000,
        grid: GRID,
        render_scale: SCALE,
        counts: Vec::new(),
    }
}

/// Splits the manifest into `(train, test_id, test_ood)` state lists after
/// checking that the out-of-distribution states really are unseen.
#[allow(clippy::type_complexity)]
pub fn split_states(m: &DatasetManifest) -> Result<(Vec<StateSpec>, Vec<StateSpec>, Vec<StateSpec>), SceneError> {
    if m.grid != GRID || m.render_scale != SCALE {
        return Err(SceneError::InvalidSplit(format!("only a {GRID}x{GRID} grid at scale {SCALE} is supported")));
    }
    let mut seen = BTreeSet::new();
    for s in &m.states {
        s.query.validate()?;
        if !seen.insert(&s.query) {
            return Err(SceneError::InvalidSplit(format!("duplicate state {}", s.query)));
        }
    }
    let of = |tag| m.states.iter().filter(|s| s.split_tag == tag).cloned().collect::<Vec<_>>();
    let (id, combo, novel) = (of(SplitTag::Id), of(SplitTag::OodUnseenCombo), of(SplitTag::OodNovelPred));
    if id.is_empty() {
        return Err(SceneError::InvalidSplit("no in-distribution states".into()));
    }
    let id_preds: BTreeSet<_> = id.iter().map(|s| &s.query.predicate).collect();
    for s in &novel {
        if id_preds.contains(&s.query.predicate) {
            return Err(SceneError::InvalidSplit(format!("novel predicate {} is also trained", s.query.predicate)));
        }
    }
    for s in &combo {
        if !id_preds.contains(&s.query.predicate) {
            return Err(SceneError::InvalidSplit(format!("{} uses an untrained predicate", s.query)));
        }
    }
    let ood = combo.into_iter().chain(novel).collect();
    Ok((id.clone(), id, ood))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub train: Vec<Example>,
    pub test_id: Vec<Example>,
    pub test_ood: Vec<Example>,
    /// Examples of the novel states, disjoint from `test_ood`.
    pub fewshot: Vec<Example>,
}

#[derive(Clone, Copy, PartialEq)]
enum Mode {
    Positive,
    NearMiss,
    Random,
}

fn random_rect(c: Category, rng: &mut ChaCha8Rng) -> Rect {
    let (w, h) = c.size();
    Rect::new(rng.random_range(0..=GRID - w), rng.random_range(0..=GRID - h), w, h)
}

/// Where `c` would sit for `predicate(c, other)` to hold, other than containment.
fn relative_rect(predicate: &str, c: Category, r2: &Rect, rng: &mut ChaCha8Rng) -> Rect {
    let (w, h) = c.size();
    let beside = |left: bool, gap: i32, rng: &mut ChaCha8Rng| {
        let x = if left { r2.x - gap - w } else { r2.right() + gap };
        Rect::new(x, rng.random_range(r2.y - h + 1..r2.bottom()), w, h)
    };
    let stacked = |above: bool, rng: &mut ChaCha8Rng| {
        let y = if above { r2.y - h } else { r2.bottom() };
        Rect::new(rng.random_range(r2.x - w + 1..r2.right()), y, w, h)
    };
    match predicate {
        "NextTo" => {
            let (left, gap) = (rng.random_bool(0.5), rng.random_range(0..=1));
            beside(left, gap, rng)
        }
        "OnLeft" => {
            let gap = rng.random_range(0..=1);
            beside(true, gap, rng)
        }
        "OnRight" => {
            let gap = rng.random_range(0..=1);
            beside(false, gap, rng)
        }
        "OnTop" => stacked(true, rng),
        "Under" => stacked(false, rng),
        _ => match rng.random_range(0..4) {
            0 => {
                let left = rng.random_bool(0.5);
                beside(left, 0, rng)
            }
            1 => {
                let above = rng.random_bool(0.5);
                stacked(above, rng)
            }
            _ => {
                let x = if rng.random_bool(0.5) { r2.x - w } else { r2.right() };
                let y = if rng.random_bool(0.5) { r2.y - h } else { r2.bottom() };
                Rect::new(x, y, w, h)
            }
        },
    }
}

fn mirrored(predicate: &str) -> &str {
    match predicate {
        "OnLeft" => "OnRight",
        "OnRight" => "OnLeft",
        "OnTop" => "Under",
        "Under" => "OnTop",
        p => p,
    }
}

fn interior(container: &Rect) -> Rect {
    Rect::new(container.x + 1, container.y + 1, 1, 1)
}

struct Builder {
    objects: Vec<SceneObject>,
}

impl Builder {
    fn has(&self, c: Category) -> bool {
        self.objects.iter().any(|o| o.category == c)
    }

    fn rect_of(&self, c: Category) -> Option<Rect> {
        self.objects.iter().find(|o| o.category == c).map(|o| o.rect)
    }

    /// Adds `c` at `rect` if it fits the grid and collides with nothing.
    fn put(&mut self, c: Category, rect: Rect, container: Option<Category>) -> bool {
        if !rect.in_grid() {
            return false;
        }
        let container_id = container.map(|k| k as u32);
        let clash = self.objects.iter().any(|o| Some(o.id) != container_id && o.rect.overlaps(&rect));
        if clash {
            return false;
        }
        self.objects.push(SceneObject {
            id: c as u32,
            category: c,
            rect,
            open_state: None,
            power_state: None,
            contained_in: container_id,
        });
        true
    }

    fn contain(&mut self, small: Category, container: Category) -> bool {
        match self.rect_of(container) {
            Some(r) if small.is_small() && container.is_container() => {
                let occupied = self.objects.iter().any(|o| o.contained_in == Some(container as u32));
                !occupied && self.put(small, interior(&r), Some(container))
            }
            _ => false,
        }
    }

    fn place_random(&mut self, c: Category, rng: &mut ChaCha8Rng) -> bool {
        (0..100).any(|_| {
            let r = random_rect(c, rng);
            self.put(c, r, None)
        })
    }
}

/// One proposal for `query`, aimed at label `want` with a near-miss
/// construction for part of the negatives. The returned scene is valid but
/// its label must still be checked.
pub fn propose_scene(query: &Query, want: bool, seed: u64) -> Option<Scene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mode = if want {
        Mode::Positive
    } else if rng.random_bool(0.6) {
        Mode::NearMiss
    } else {
        Mode::Random
    };
    let p = query.predicate.as_str();
    let mut b = Builder { objects: Vec::new() };
    if let (Some(o2), true) = (query.obj2, mode != Mode::Random) {
        let o1 = query.obj1;
        match p {
            "Inside" | "Contains" => {
                let (small, container) = if p == "Inside" { (o1, o2) } else { (o2, o1) };
                if !b.place_random(container, &mut rng) {
                    return None;
                }
                if mode == Mode::Positive {
                    if !b.contain(small, container) {
                        return None;
                    }
                } else {
                    let r2 = b.rect_of(container)?;
                    let r = relative_rect("Touching", small, &r2, &mut rng);
                    if !b.put(small, r, None) {
                        return None;
                    }
                }
            }
            _ => {
                if !b.place_random(o2, &mut rng) {
                    return None;
                }
                let r2 = b.rect_of(o2)?;
                let mut r = if mode == Mode::NearMiss && rng.random_bool(0.5) && mirrored(p) != p {
                    relative_rect(mirrored(p), o1, &r2, &mut rng)
                } else {
                    relative_rect(p, o1, &r2, &mut rng)
                };
                if mode == Mode::NearMiss {
                    let d = *[-2, -1, 1, 2].choose(&mut rng)?;
                    if rng.random_bool(0.5) {
                        r.x += d;
                    } else {
                        r.y += d;
                    }
                }
                if !b.put(o1, r, None) {
                    return None;
                }
            }
        }
    }
    let fill_order = [
        Category::Cabinet,
        Category::Microwave,
        Category::Box,
        Category::Lamp,
        Category::Plate,
        Category::Cup,
        Category::BlockRed,
        Category::BlockBlue,
    ];
    for c in fill_order {
        if b.has(c) {
            continue;
        }
        if c.is_small() && rng.random_bool(0.2) {
            let k = *[Category::Cabinet, Category::Microwave, Category::Box].choose(&mut rng)?;
            if b.contain(c, k) {
                continue;
            }
        }
        if !b.place_random(c, &mut rng) {
            return None;
        }
    }
    for o in &mut b.objects {
        if o.category.is_container() {
            o.open_state = Some(rng.random_bool(0.5));
        }
        if o.category == Category::Lamp {
            o.power_state = Some(rng.random_bool(0.5));
        }
    }
    let forced = match p {
        "Open" | "TurnedOn" => Some(want),
        "Closed" | "TurnedOff" => Some(!want),
        _ => None,
    };
    if let Some(v) = forced {
        let o = b.objects.iter_mut().find(|o| o.category == query.obj1)?;
        if o.category.is_container() {
            o.open_state = Some(v);
        } else {
            o.power_state = Some(v);
        }
    }
    b.objects.sort_by_key(|o| o.id);
    let scene = Scene { objects: b.objects, seed };
    scene.validate().ok().map(|_| scene)
}

/// Rejection-samples `per_label` true and false examples of one state.
fn generate_state(
    spec: &StateSpec,
    per_label: usize,
    seed: u64,
    max_attempts: u64,
    exec: Exec,
) -> Result<Vec<Example>, SceneError> {
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    let mut attempt = 0u64;
    while pos.len() < per_label || neg.len() < per_label {
        if attempt >= max_attempts {
            return Err(SceneError::Quota {
                state: spec.query.to_string(),
                attempts: attempt,
                positives: pos.len(),
                negatives: neg.len(),
            });
        }
        let n = CHUNK.min(max_attempts - attempt);
        let (need_pos, need_neg) = (pos.len() < per_label, neg.len() < per_label);
        let results = par::map_indexed(exec, n as usize, |i| {
            let a = attempt + i as u64;
            let want = if need_pos && need_neg { a.is_multiple_of(2) } else { need_pos };
            let scene = propose_scene(&spec.query, want, derive_seed(seed, &[a]))?;
            let label = eval_predicate(&scene, &spec.query).ok()?;
            Some((scene, label))
        });
        for (scene, label) in results.into_iter().flatten() {
            let bucket = if label { &mut pos } else { &mut neg };
            if bucket.len() < per_label {
                bucket.push(Example { scene, query: spec.query.clone(), label, split_tag: spec.split_tag });
            }
        }
        attempt += n;
    }
    Ok(pos.into_iter().zip(neg).flat_map(|(p, n)| [p, n]).collect())
}

fn generate_split(
    m: &DatasetManifest,
    split: &str,
    salt: u64,
    states: &[StateSpec],
    per_label: usize,
    exec: Exec,
    counts: &mut Vec<StateCount>,
) -> Result<Vec<Example>, SceneError> {
    let mut out = Vec::new();
    for (i, s) in states.iter().enumerate() {
        let ex = generate_state(s, per_label, derive_seed(m.seed, &[salt, i as u64]), m.max_attempts, exec)?;
        let positives = ex.iter().filter(|e| e.label).count();
        counts.push(StateCount {
            split: split.to_string(),
            state: s.query.to_string(),
            positives,
            negatives: ex.len() - positives,
        });
        out.extend(ex);
    }
    Ok(out)
}

/// Generates every split of the manifest. Deterministic in the manifest
/// alone; `exec` only changes how attempts are scheduled.
pub fn generate_dataset(manifest: &DatasetManifest, exec: Exec) -> Result<Dataset, SceneError> {
    let (train_s, id_s, ood_s) = split_states(manifest)?;
    let novel: Vec<_> = ood_s.iter().filter(|s| s.split_tag == SplitTag::OodNovelPred).cloned().collect();
    let mut counts = Vec::new();
    let m = manifest;
    let train = generate_split(m, "train", 0, &train_s, m.train_per_label, exec, &mut counts)?;
    let test_id = generate_split(m, "test_id", 1, &id_s, m.test_per_label, exec, &mut counts)?;
    let test_ood = generate_split(m, "test_ood", 2, &ood_s, m.test_per_label, exec, &mut counts)?;
    let fewshot = generate_split(m, "fewshot_pool", 3, &novel, m.fewshot_per_label, exec, &mut counts)?;
    let manifest = DatasetManifest { counts, ..manifest.clone() };
    Ok(Dataset { manifest, train, test_id, test_ood, fewshot })
}

/// The first `shots` examples of every state, in stored order.
pub fn fewshot_subset(pool: &[Example], shots: usize) -> Result<Vec<Example>, SceneError> {
    let mut taken: BTreeMap<&Query, usize> = BTreeMap::new();
    let mut out = Vec::new();
    for e in pool {
        let k = taken.entry(&e.query).or_default();
        if *k < shots {
            *k += 1;
            out.push(e.clone());
        }
    }
    if let Some((q, n)) = taken.iter().find(|(_, &n)| n < shots) {
        return Err(SceneError::InvalidSplit(format!("{shots} shots requested but {q} has {n} examples")));
    }
    Ok(out)
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SPLIT_FILES: [&str; 4] = ["train.jsonl", "test_id.jsonl", "test_ood.jsonl", "fewshot_pool.jsonl"];

fn jsonl(examples: &[Example]) -> String {
    let mut s = String::new();
    for e in examples {
        s.push_str(&serde_json::to_string(e).expect("examples serialize"));
        s.push('\n');
    }
    s
}

impl Dataset {
    fn files(&self) -> [(&'static str, String); 5] {
        let manifest = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes") + "\n";
        [
            (MANIFEST_FILE, manifest),
            (SPLIT_FILES[0], jsonl(&self.train)),
            (SPLIT_FILES[1], jsonl(&self.test_id)),
            (SPLIT_FILES[2], jsonl(&self.test_ood)),
            (SPLIT_FILES[3], jsonl(&self.fewshot)),
        ]
    }

    pub fn all_examples(&self) -> impl Iterator<Item = &Example> {
        self.train.iter().chain(&self.test_id).chain(&self.test_ood).chain(&self.fewshot)
    }
}

/// Hex SHA-256 over the serialized dataset files, in file order.
pub fn dataset_digest(d: &Dataset) -> String {
    let mut h = Sha256::new();
    for (name, body) in d.files() {
        h.update(name.as_bytes());
        h.update([0]);
        h.update(body.as_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn save_dataset(d: &Dataset, dir: &Path) -> Result<(), SceneError> {
    fs::create_dir_all(dir)?;
    for (name, body) in d.files() {
        fs::write(dir.join(name), body)?;
    }
    Ok(())
}

fn read_examples(path: &Path) -> Result<Vec<Example>, SceneError> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let fail = |msg: String| SceneError::Format { path: format!("{}:{}", path.display(), i + 1), msg };
        let e: Example = serde_json::from_str(line).map_err(|e| fail(e.to_string()))?;
        e.scene.validate().map_err(|e| fail(e.to_string()))?;
        if eval_predicate(&e.scene, &e.query)? != e.label {
            return Err(fail("stored label disagrees with the scene".into()));
        }
        out.push(e);
    }
    Ok(out)
}

/// Loads a dataset directory; labels are re-checked against their scenes.
pub fn load_dataset(dir: &Path) -> Result<Dataset, SceneError> {
    let mpath = dir.join(MANIFEST_FILE);
    let manifest: DatasetManifest = serde_json::from_str(&fs::read_to_string(&mpath)?)
        .map_err(|e| SceneError::Format { path: mpath.display().to_string(), msg: e.to_string() })?;
    let fewshot_path = dir.join(SPLIT_FILES[3]);
    Ok(Dataset {
        manifest,
        train: read_examples(&dir.join(SPLIT_FILES[0]))?,
        test_id: read_examples(&dir.join(SPLIT_FILES[1]))?,
        test_ood: read_examples(&dir.join(SPLIT_FILES[2]))?,
        fewshot: if fewshot_path.exists() { read_examples(&fewshot_path)? } else { Vec::new() },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_manifest() -> DatasetManifest {
        DatasetManifest { train_per_label: 10, test_per_label: 4, fewshot_per_label: 2, ..default_manifest(5) }
    }

    #[test]
    fn default_split_is_consistent() {
        let (train, id, ood) = split_states(&default_manifest(0)).unwrap();
        assert_eq!(train.len(), 8);
        assert_eq!(id, train);
        assert_eq!(ood.len(), 11);
        let train_preds: BTreeSet<_> = train.iter().map(|s| s.query.predicate.as_str()).collect();
        for s in &ood {
            assert!(!train.iter().any(|t| t.query == s.query));
            let novel = s.split_tag == SplitTag::OodNovelPred;
            assert_eq!(novel, !train_preds.contains(s.query.predicate.as_str()));
        }
    }

    #[test]
    fn bad_splits_are_rejected() {
        let mut m = default_manifest(0);
        m.states.push(StateSpec {
            query: Query::binary("NextTo", Category::Box, Category::Lamp),
            split_tag: SplitTag::OodNovelPred,
        });
        assert!(split_states(&m).is_err());
        let mut m = default_manifest(0);
        m.states.push(m.states[0].clone());
        assert!(split_states(&m).is_err());
    }

    #[test]
    fn small_dataset_is_balanced_and_deterministic() {
        let m = small_manifest();
        let d = generate_dataset(&m, Exec::Parallel).unwrap();
        assert_eq!(d.train.len(), 8 * 20);
        assert_eq!(d.test_ood.len(), 11 * 8);
        assert_eq!(d.fewshot.len(), 4 * 4);
        for c in &d.manifest.counts {
            assert_eq!(c.positives, c.negatives, "{c:?}");
        }
        for e in d.all_examples() {
            assert_eq!(eval_predicate(&e.scene, &e.query).unwrap(), e.label);
        }
        let again = generate_dataset(&m, Exec::Sequential).unwrap();
        assert_eq!(dataset_digest(&d), dataset_digest(&again));
        let other = generate_dataset(&DatasetManifest { seed: 6, ..m }, Exec::Parallel).unwrap();
        assert_ne!(dataset_digest(&d), dataset_digest(&other));
        let shots = fewshot_subset(&d.fewshot, 1).unwrap();
        assert_eq!(shots.len(), 4);
        assert!(shots.iter().all(|e| e.label));
        assert!(fewshot_subset(&d.fewshot, 5).is_err());
    }

    #[test]
    fn impossible_state_reports_quota() {
        let m = DatasetManifest {
            states: vec![StateSpec {
                query: Query::binary("Inside", Category::Cabinet, Category::Cup),
                split_tag: SplitTag::Id,
            }],
            max_attempts: 500,
            ..small_manifest()
        };
        match generate_dataset(&m, Exec::Parallel) {
            Err(SceneError::Quota { state, positives: 0, .. }) => assert_eq!(state, "Inside(cabinet, cup)"),
            r => panic!("unexpected {:?}", r.map(|d| d.train.len())),
        }
    }

    #[test]
    fn near_miss_negatives_are_hard() {
        // Most OnLeft negatives from the near-miss proposal still touch or
        // neighbour the reference object.
        let q = Query::binary("OnLeft", Category::BlockRed, Category::BlockBlue);
        let mut close = 0;
        let mut total = 0;
        for a in 0..400u64 {
            if let Some(s) = propose_scene(&q, false, derive_seed(1, &[a])) {
                if !eval_predicate(&s, &q).unwrap() {
                    total += 1;
                    let t = Query::binary("Touching", Category::BlockRed, Category::BlockBlue);
                    let n = Query::binary("NextTo", Category::BlockRed, Category::BlockBlue);
                    close += (eval_predicate(&s, &t).unwrap() || eval_predicate(&s, &n).unwrap()) as usize;
                }
            }
        }
        assert!(total > 100 && close * 5 > total, "{close}/{total}");
    }

    #[test]
    fn files_round_trip() {
        let d = generate_dataset(&small_manifest(), Exec::Parallel).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&d, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back, d);
        let mut lines: Vec<String> =
            fs::read_to_string(dir.path().join("train.jsonl")).unwrap().lines().map(String::from).collect();
        lines[0] = lines[0].replace("\"label\":true", "\"label\":false");
        fs::write(dir.path().join("train.jsonl"), lines.join("\n")).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(SceneError::Format { .. })));
    }
}
