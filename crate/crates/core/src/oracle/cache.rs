//! Relation cache, subprocess LLM transport and strict reply parsing.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::{Command, Stdio};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::prompts::{render_rank_prompt, render_triplet_prompt};
use super::{
    tree_rank, tree_triplet, triple_key, HierarchyRank, OracleError, PredicateName, PredicateTree, RelationVerdict,
};
use crate::par::{self, Exec};

/// Environment variable holding the default transport command.
pub const LLM_CMD_ENV: &str = "PHIER_LLM_CMD";

/// One cached triple: the seeded anchor choice, its verdict and the ranking.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: String,
    pub anchor: PredicateName,
    pub positive: PredicateName,
    pub negative: PredicateName,
    pub least: PredicateName,
    pub middle: PredicateName,
    pub most: PredicateName,
    #[serde(default)]
    pub raw_responses: Vec<String>,
}

impl CacheEntry {
    fn new(verdict: RelationVerdict, rank: HierarchyRank, raw_responses: Vec<String>) -> Self {
        CacheEntry {
            key: triple_key([&verdict.anchor, &verdict.positive, &verdict.negative]),
            anchor: verdict.anchor,
            positive: verdict.positive,
            negative: verdict.negative,
            least: rank.least,
            middle: rank.middle,
            most: rank.most,
            raw_responses,
        }
    }

    pub fn verdict(&self) -> RelationVerdict {
        RelationVerdict {
            anchor: self.anchor.clone(),
            positive: self.positive.clone(),
            negative: self.negative.clone(),
        }
    }

    pub fn rank(&self) -> HierarchyRank {
        HierarchyRank { least: self.least.clone(), middle: self.middle.clone(), most: self.most.clone() }
    }

    fn check(&self) -> Result<(), String> {
        let names = [&self.anchor, &self.positive, &self.negative];
        if triple_key(names) != self.key {
            return Err(format!("verdict names do not match key {}", self.key));
        }
        if triple_key([&self.least, &self.middle, &self.most]) != self.key {
            return Err(format!("ranking names do not match key {}", self.key));
        }
        Ok(())
    }
}

/// Verdicts keyed by the canonical triple key.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RelationCache {
    entries: BTreeMap<String, CacheEntry>,
}

impl RelationCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, entry: CacheEntry) {
        self.entries.insert(entry.key.clone(), entry);
    }

    pub fn get(&self, key: &str) -> Option<&CacheEntry> {
        self.entries.get(key)
    }

    pub fn lookup(&self, names: [&PredicateName; 3]) -> Result<&CacheEntry, OracleError> {
        let key = triple_key(names);
        self.entries.get(&key).ok_or(OracleError::CacheMiss(key))
    }

    pub fn entries(&self) -> impl Iterator<Item = &CacheEntry> {
        self.entries.values()
    }

    /// One JSON object per line, in key order.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in self.entries.values() {
            out.push_str(&serde_json::to_string(e).expect("cache entries serialize"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, OracleError> {
        let mut cache = RelationCache::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |msg: String| OracleError::CacheFormat { line: i + 1, msg };
            let e: CacheEntry = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
            e.check().map_err(bad)?;
            cache.insert(e);
        }
        Ok(cache)
    }

    /// Reads a cache file; a missing file is an empty cache.
    pub fn load(path: &Path) -> Result<Self, OracleError> {
        match fs::read_to_string(path) {
            Ok(text) => Self::from_jsonl(&text),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Self::new()),
            Err(e) => Err(e.into()),
        }
    }

    /// Writes to a sibling temporary file, then renames it over `path`.
    pub fn save(&self, path: &Path) -> Result<(), OracleError> {
        let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
        tmp_name.push(format!(".tmp{}", std::process::id()));
        let tmp = path.with_file_name(tmp_name);
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(self.to_jsonl().as_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }
}

/// Seeded uniform choice of the anchor among the three sorted names.
fn anchor_index(seed: u64, key: &str) -> usize {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(key.as_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 32];
    bytes.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(bytes).random_range(0..3)
}

/// Sorted names with the anchor moved to the front.
fn arrange(seed: u64, names: [&PredicateName; 3]) -> (String, [PredicateName; 3]) {
    let mut sorted = names.map(Clone::clone);
    sorted.sort();
    let key = triple_key(names);
    let a = anchor_index(seed, &key);
    sorted[..=a].rotate_right(1);
    (key, sorted)
}

fn all_triples(predicates: &[PredicateName]) -> Result<Vec<[&PredicateName; 3]>, OracleError> {
    let mut sorted: Vec<&PredicateName> = predicates.iter().collect();
    sorted.sort();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(OracleError::NotDistinct(format!("{predicates:?}")));
    }
    let n = sorted.len();
    let mut out = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            for k in j + 1..n {
                out.push([sorted[i], sorted[j], sorted[k]]);
            }
        }
    }
    Ok(out)
}

/// Relations for every triple of `predicates` from the ground-truth tree.
pub fn tree_relations(
    tree: &PredicateTree,
    predicates: &[PredicateName],
    seed: u64,
) -> Result<RelationCache, OracleError> {
    let mut cache = RelationCache::new();
    for names in all_triples(predicates)? {
        let (_, [a, q1, q2]) = arrange(seed, names);
        let verdict = tree_triplet(tree, &a, &q1, &q2)?;
        let rank = tree_rank(tree, &a, &q1, &q2)?;
        cache.insert(CacheEntry::new(verdict, rank, Vec::new()));
    }
    Ok(cache)
}

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("could not run `{command}`: {source}")]
    Spawn { command: String, source: std::io::Error },
    #[error("`{command}` exited with {status}: {stderr}")]
    Status { command: String, status: String, stderr: String },
    #[error("reply is not UTF-8")]
    Utf8,
    #[error("gave up after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: Box<TransportError> },
}

/// Sends a prompt and returns the completion.
pub trait Transport: Sync {
    fn complete(&self, prompt: &str) -> Result<String, TransportError>;
}

/// Runs `sh -c COMMAND` with the prompt on stdin and reads the reply from
/// stdout, retrying failed calls with exponential backoff.
#[derive(Clone, Debug)]
pub struct CommandTransport {
    pub command: String,
    pub attempts: u32,
    pub backoff: Duration,
}

impl CommandTransport {
    pub fn new(command: impl Into<String>) -> Self {
        CommandTransport { command: command.into(), attempts: 3, backoff: Duration::from_millis(250) }
    }

    fn once(&self, prompt: &str) -> Result<String, TransportError> {
        let spawn_err = |source| TransportError::Spawn { command: self.command.clone(), source };
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(&self.command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(spawn_err)?;
        let mut stdin = child.stdin.take().expect("piped stdin");
        // A command that ignores its input may close the pipe early.
        let _ = stdin.write_all(prompt.as_bytes());
        drop(stdin);
        let out = child.wait_with_output().map_err(spawn_err)?;
        if !out.status.success() {
            return Err(TransportError::Status {
                command: self.command.clone(),
                status: out.status.to_string(),
                stderr: String::from_utf8_lossy(&out.stderr).trim().to_string(),
            });
        }
        String::from_utf8(out.stdout).map_err(|_| TransportError::Utf8)
    }
}

impl Transport for CommandTransport {
    fn complete(&self, prompt: &str) -> Result<String, TransportError> {
        let attempts = self.attempts.max(1);
        let mut delay = self.backoff;
        let mut last = None;
        for i in 0..attempts {
            match self.once(prompt) {
                Ok(s) => return Ok(s),
                Err(e) => {
                    log::warn!("transport attempt {} of {attempts} failed: {e}", i + 1);
                    last = Some(e);
                }
            }
            if i + 1 < attempts {
                std::thread::sleep(delay);
                delay *= 2;
            }
        }
        Err(TransportError::Exhausted { attempts, last: Box::new(last.expect("at least one attempt")) })
    }
}

fn strip_brackets(s: &str) -> &str {
    let s = s.trim();
    s.strip_prefix('[').and_then(|r| r.strip_suffix(']')).map(str::trim).unwrap_or(s)
}

fn field<'a>(raw: &'a str, label: &str) -> Option<&'a str> {
    raw.lines().find_map(|l| l.trim().strip_prefix(label)).map(strip_brackets)
}

/// Reads the `Answer: Query 1|2` line; returns 1 or 2.
pub fn parse_triplet_reply(raw: &str) -> Option<u8> {
    match field(raw, "Answer:")? {
        "Query 1" => Some(1),
        "Query 2" => Some(2),
        _ => None,
    }
}

/// Reads the three ranking lines, each of which must repeat one description
/// verbatim; returns description indices from least to most specific.
pub fn parse_rank_reply(raw: &str, texts: [&str; 3]) -> Option<[usize; 3]> {
    let mut out = [0; 3];
    for (slot, label) in out.iter_mut().zip(["Least Specific:", "Intermediate Specific:", "Most Specific:"]) {
        let v = field(raw, label)?;
        *slot = texts.iter().position(|t| *t == v)?;
    }
    let mut seen = out;
    seen.sort_unstable();
    (seen == [0, 1, 2]).then_some(out)
}

fn query_llm(
    names: [PredicateName; 3],
    key: &str,
    surface: &BTreeMap<PredicateName, String>,
    transport: &dyn Transport,
) -> Result<CacheEntry, OracleError> {
    let texts = names
        .iter()
        .map(|n| surface.get(n).map(String::as_str).ok_or_else(|| OracleError::MissingSurface(n.to_string())))
        .collect::<Result<Vec<_>, _>>()?;
    let texts = [texts[0], texts[1], texts[2]];
    if texts[0] == texts[1] || texts[1] == texts[2] || texts[0] == texts[2] {
        return Err(OracleError::NotDistinct(format!("surface forms of {key}")));
    }
    let send = |prompt: String| {
        transport.complete(&prompt).map_err(|source| OracleError::Transport { key: key.to_string(), source })
    };
    let triplet_raw = send(render_triplet_prompt(texts[0], texts[1], texts[2]))?;
    let rank_raw = send(render_rank_prompt(texts[0], texts[1], texts[2]))?;
    let choice = parse_triplet_reply(&triplet_raw).ok_or_else(|| OracleError::Parse {
        kind: "triplet",
        key: key.to_string(),
        raw: triplet_raw.clone(),
    })?;
    let order = parse_rank_reply(&rank_raw, texts).ok_or_else(|| OracleError::Parse {
        kind: "rank",
        key: key.to_string(),
        raw: rank_raw.clone(),
    })?;
    let [a, q1, q2] = names;
    let (positive, negative) = if choice == 1 { (q1.clone(), q2.clone()) } else { (q2.clone(), q1.clone()) };
    let all = [a.clone(), q1, q2];
    let rank =
        HierarchyRank { least: all[order[0]].clone(), middle: all[order[1]].clone(), most: all[order[2]].clone() };
    Ok(CacheEntry::new(RelationVerdict { anchor: a, positive, negative }, rank, vec![triplet_raw, rank_raw]))
}

/// Fills `cache_path` with LLM relations for every triple of `predicates`.
///
/// Triples already cached are not sent again. Successful replies are saved
/// even when other triples fail; the first failure in key order is returned.
pub fn llm_relations(
    predicates: &[PredicateName],
    surface: &BTreeMap<PredicateName, String>,
    transport: &dyn Transport,
    cache_path: &Path,
    seed: u64,
    exec: Exec,
) -> Result<RelationCache, OracleError> {
    let mut cache = RelationCache::load(cache_path)?;
    let missing: Vec<(String, [PredicateName; 3])> = all_triples(predicates)?
        .into_iter()
        .map(|n| arrange(seed, n))
        .filter(|(k, _)| cache.get(k).is_none())
        .collect();
    if missing.is_empty() {
        return Ok(cache);
    }
    log::info!("querying {} triples", missing.len());
    let results = par::map_indexed(exec, missing.len(), |i| {
        let (key, names) = &missing[i];
        query_llm(names.clone(), key, surface, transport)
    });
    let mut first_err = None;
    for r in results {
        match r {
            Ok(e) => cache.insert(e),
            Err(e) => {
                log::error!("{e}");
                first_err.get_or_insert(e);
            }
        }
    }
    cache.save(cache_path)?;
    match first_err {
        Some(e) => Err(e),
        None => Ok(cache),
    }
}
