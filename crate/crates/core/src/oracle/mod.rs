//! Predicate relation oracles: a ground-truth tree and an LLM prompt client,
//! both producing triplet verdicts and specificity rankings.

mod cache;
mod prompts;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cache::{
    llm_relations, parse_rank_reply, parse_triplet_reply, tree_relations, CacheEntry, CommandTransport, RelationCache,
    Transport, TransportError, LLM_CMD_ENV,
};
pub use prompts::{render_rank_prompt, render_triplet_prompt, RANK_TEMPLATE, TRIPLET_TEMPLATE};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("invalid predicate name `{0}`")]
    InvalidName(String),
    #[error("unknown predicate `{0}`")]
    UnknownPredicate(String),
    #[error("predicates must be distinct: {0}")]
    NotDistinct(String),
    #[error("invalid tree: {0}")]
    InvalidTree(String),
    #[error("no surface form for predicate `{0}`")]
    MissingSurface(String),
    #[error("unparseable {kind} reply for triple {key}: {raw:?}")]
    Parse { kind: &'static str, key: String, raw: String },
    #[error("transport failed for triple {key}: {source}")]
    Transport { key: String, source: TransportError },
    #[error("triple {0} not in relation cache")]
    CacheMiss(String),
    #[error("relation cache line {line}: {msg}")]
    CacheFormat { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A predicate symbol such as `NextTo`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct PredicateName(String);

impl PredicateName {
    pub fn new(text: impl Into<String>) -> Result<Self, OracleError> {
        let text = text.into();
        let mut chars = text.chars();
        let ok = chars.next().is_some_and(|c| c.is_ascii_alphabetic())
            && chars.all(|c| c.is_ascii_alphanumeric() || c == '_');
        if ok {
            Ok(PredicateName(text))
        } else {
            Err(OracleError::InvalidName(text))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for PredicateName {
    type Error = OracleError;
    fn try_from(s: String) -> Result<Self, OracleError> {
        PredicateName::new(s)
    }
}

impl From<PredicateName> for String {
    fn from(p: PredicateName) -> String {
        p.0
    }
}

impl fmt::Display for PredicateName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Parses a literal known to be valid.
pub(crate) fn pred(s: &str) -> PredicateName {
    PredicateName::new(s).expect("literal predicate name")
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationVerdict {
    pub anchor: PredicateName,
    pub positive: PredicateName,
    pub negative: PredicateName,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HierarchyRank {
    pub least: PredicateName,
    pub middle: PredicateName,
    pub most: PredicateName,
}

impl HierarchyRank {
    pub fn as_array(&self) -> [&PredicateName; 3] {
        [&self.least, &self.middle, &self.most]
    }
}

fn distinct3(a: &PredicateName, b: &PredicateName, c: &PredicateName) -> Result<(), OracleError> {
    if a == b || b == c || a == c {
        Err(OracleError::NotDistinct(format!("{a}, {b}, {c}")))
    } else {
        Ok(())
    }
}

/// Canonical key of an unordered triple: sorted names joined by `|`.
pub fn triple_key(names: [&PredicateName; 3]) -> String {
    let mut v = names.map(PredicateName::as_str);
    v.sort_unstable();
    v.join("|")
}

/// The twelve predicates of the default tree, in tree order.
pub const DEFAULT_PREDICATES: [&str; 12] = [
    "NextTo",
    "OnLeft",
    "OnRight",
    "OnTop",
    "Under",
    "Inside",
    "Contains",
    "Touching",
    "Open",
    "Closed",
    "TurnedOn",
    "TurnedOff",
];

/// A rooted tree over predicate names.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PredicateTree {
    root: PredicateName,
    parent: BTreeMap<PredicateName, PredicateName>,
    depth: BTreeMap<PredicateName, usize>,
    order: Vec<PredicateName>,
}

impl PredicateTree {
    /// Builds a tree from `(child, parent)` edges; the root is the one node
    /// that never appears as a child.
    pub fn from_edges(edges: &[(PredicateName, PredicateName)]) -> Result<Self, OracleError> {
        let mut parent = BTreeMap::new();
        let mut order = Vec::new();
        for (c, p) in edges {
            if parent.insert(c.clone(), p.clone()).is_some() {
                return Err(OracleError::InvalidTree(format!("`{c}` has more than one parent")));
            }
        }
        let mut roots: Vec<&PredicateName> = parent.values().filter(|p| !parent.contains_key(*p)).collect();
        roots.sort();
        roots.dedup();
        let root = match roots.as_slice() {
            [r] => (*r).clone(),
            [] => return Err(OracleError::InvalidTree("no root".into())),
            _ => return Err(OracleError::InvalidTree(format!("several roots: {roots:?}"))),
        };
        let mut depth = BTreeMap::from([(root.clone(), 0usize)]);
        order.push(root.clone());
        // Breadth-first from the root, children in edge order.
        let mut frontier = vec![root.clone()];
        while !frontier.is_empty() {
            let mut next = Vec::new();
            for node in &frontier {
                for (c, p) in edges {
                    if p == node {
                        depth.insert(c.clone(), depth[node] + 1);
                        order.push(c.clone());
                        next.push(c.clone());
                    }
                }
            }
            frontier = next;
        }
        if depth.len() != parent.len() + 1 {
            return Err(OracleError::InvalidTree("cycle detached from the root".into()));
        }
        Ok(PredicateTree { root, parent, depth, order })
    }

    /// The default hierarchy over the twelve scene predicates.
    pub fn default_tree() -> Self {
        const EDGES: [(&str, &str); 19] = [
            ("SpatialRelation", "Root"),
            ("Contact", "Root"),
            ("UnaryState", "Root"),
            ("NextTo", "SpatialRelation"),
            ("Vertical", "SpatialRelation"),
            ("Containment", "SpatialRelation"),
            ("OnLeft", "NextTo"),
            ("OnRight", "NextTo"),
            ("OnTop", "Vertical"),
            ("Under", "Vertical"),
            ("Inside", "Containment"),
            ("Contains", "Containment"),
            ("Touching", "Contact"),
            ("Openness", "UnaryState"),
            ("Power", "UnaryState"),
            ("Open", "Openness"),
            ("Closed", "Openness"),
            ("TurnedOn", "Power"),
            ("TurnedOff", "Power"),
        ];
        let edges: Vec<_> = EDGES.iter().map(|(c, p)| (pred(c), pred(p))).collect();
        PredicateTree::from_edges(&edges).expect("default tree is valid")
    }

    pub fn root(&self) -> &PredicateName {
        &self.root
    }

    /// All nodes, breadth-first.
    pub fn nodes(&self) -> &[PredicateName] {
        &self.order
    }

    pub fn contains(&self, p: &PredicateName) -> bool {
        self.depth.contains_key(p)
    }

    pub fn parent(&self, p: &PredicateName) -> Option<&PredicateName> {
        self.parent.get(p)
    }

    /// `(child, parent)` pairs, breadth-first.
    pub fn edges(&self) -> Vec<(&PredicateName, &PredicateName)> {
        self.order.iter().filter_map(|c| self.parent.get(c).map(|p| (c, p))).collect()
    }

    pub fn depth(&self, p: &PredicateName) -> Result<usize, OracleError> {
        self.depth.get(p).copied().ok_or_else(|| OracleError::UnknownPredicate(p.to_string()))
    }

    fn ancestors<'a>(&'a self, mut p: &'a PredicateName) -> Vec<&'a PredicateName> {
        let mut out = vec![p];
        while let Some(q) = self.parent.get(p) {
            out.push(q);
            p = q;
        }
        out
    }

    /// Number of edges on the path between two nodes.
    pub fn distance(&self, a: &PredicateName, b: &PredicateName) -> Result<usize, OracleError> {
        let (da, db) = (self.depth(a)?, self.depth(b)?);
        let up_a = self.ancestors(a);
        let lca_depth = self
            .ancestors(b)
            .into_iter()
            .find(|n| up_a.contains(n))
            .map(|n| self.depth[n])
            .expect("nodes share the root");
        Ok(da + db - 2 * lca_depth)
    }
}

/// Picks as positive the query closer to the anchor in the tree; ties go to
/// the lexicographically smaller name.
pub fn tree_triplet(
    tree: &PredicateTree,
    anchor: &PredicateName,
    q1: &PredicateName,
    q2: &PredicateName,
) -> Result<RelationVerdict, OracleError> {
    distinct3(anchor, q1, q2)?;
    let d1 = tree.distance(anchor, q1)?;
    let d2 = tree.distance(anchor, q2)?;
    let (positive, negative) = if (d1, q1) < (d2, q2) { (q1, q2) } else { (q2, q1) };
    Ok(RelationVerdict { anchor: anchor.clone(), positive: positive.clone(), negative: negative.clone() })
}

/// Orders three predicates by depth, shallowest (least specific) first; ties
/// are broken by name.
pub fn tree_rank(
    tree: &PredicateTree,
    a: &PredicateName,
    b: &PredicateName,
    c: &PredicateName,
) -> Result<HierarchyRank, OracleError> {
    distinct3(a, b, c)?;
    let mut v = [(tree.depth(a)?, a), (tree.depth(b)?, b), (tree.depth(c)?, c)];
    v.sort();
    Ok(HierarchyRank { least: v[0].1.clone(), middle: v[1].1.clone(), most: v[2].1.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn names_are_validated() {
        assert!(PredicateName::new("OnLeft").is_ok());
        assert!(PredicateName::new("a_1").is_ok());
        for bad in ["", "1abc", "_x", "On Left", "Näh"] {
            assert!(PredicateName::new(bad).is_err(), "{bad}");
        }
        assert!(serde_json::from_str::<PredicateName>("\"9x\"").is_err());
    }

    #[test]
    fn default_tree_shape() {
        let t = PredicateTree::default_tree();
        assert_eq!(t.nodes().len(), 20);
        assert_eq!(t.root().as_str(), "Root");
        for p in DEFAULT_PREDICATES {
            assert!(t.contains(&pred(p)));
        }
        assert_eq!(t.depth(&pred("Contact")).unwrap(), 1);
        assert_eq!(t.depth(&pred("NextTo")).unwrap(), 2);
        assert_eq!(t.depth(&pred("Touching")).unwrap(), 2);
        assert_eq!(t.depth(&pred("OnLeft")).unwrap(), 3);
        assert_eq!(t.distance(&pred("OnLeft"), &pred("OnRight")).unwrap(), 2);
        assert_eq!(t.distance(&pred("OnLeft"), &pred("Open")).unwrap(), 6);
        assert_eq!(t.distance(&pred("NextTo"), &pred("OnLeft")).unwrap(), 1);
    }

    #[test]
    fn invalid_trees_are_rejected() {
        let e = |c: &str, p: &str| (pred(c), pred(p));
        assert!(PredicateTree::from_edges(&[e("A", "R"), e("A", "S")]).is_err());
        assert!(PredicateTree::from_edges(&[e("A", "R"), e("B", "S")]).is_err());
        assert!(PredicateTree::from_edges(&[e("A", "R"), e("B", "C"), e("C", "B")]).is_err());
    }

    #[test]
    fn triplet_examples() {
        let t = PredicateTree::default_tree();
        let v = tree_triplet(&t, &pred("OnLeft"), &pred("OnRight"), &pred("Open")).unwrap();
        assert_eq!(v.positive.as_str(), "OnRight");
        let v = tree_triplet(&t, &pred("NextTo"), &pred("OnLeft"), &pred("OnTop")).unwrap();
        assert_eq!(v.positive.as_str(), "OnLeft");
        // OnTop and Under are both at distance 2 from Vertical.
        let v = tree_triplet(&t, &pred("Vertical"), &pred("Under"), &pred("OnTop")).unwrap();
        assert_eq!((v.positive.as_str(), v.negative.as_str()), ("OnTop", "Under"));
        assert!(tree_triplet(&t, &pred("Open"), &pred("Open"), &pred("Closed")).is_err());
        assert!(matches!(
            tree_triplet(&t, &pred("Open"), &pred("Ajar"), &pred("Closed")),
            Err(OracleError::UnknownPredicate(_))
        ));
    }

    #[test]
    fn rank_examples() {
        let t = PredicateTree::default_tree();
        let r = tree_rank(&t, &pred("OnLeft"), &pred("Contact"), &pred("NextTo")).unwrap();
        assert_eq!(r.as_array().map(PredicateName::as_str), ["Contact", "NextTo", "OnLeft"]);
        let r = tree_rank(&t, &pred("Open"), &pred("Closed"), &pred("Inside")).unwrap();
        assert_eq!(r.as_array().map(PredicateName::as_str), ["Closed", "Inside", "Open"]);
        let r = tree_rank(&t, &pred("Touching"), &pred("NextTo"), &pred("OnLeft")).unwrap();
        assert_eq!(r.as_array().map(PredicateName::as_str), ["NextTo", "Touching", "OnLeft"]);
    }

    #[test]
    fn parent_child_grandchild_ranked_by_depth() {
        let t = PredicateTree::default_tree();
        for (c, p) in t.edges() {
            if let Some(g) = t.parent(p) {
                let r = tree_rank(&t, c, g, p).unwrap();
                assert_eq!(r.as_array(), [g, p, c]);
            }
        }
    }

    proptest! {
        #[test]
        fn oracles_are_permutation_consistent(i in 0usize..20, j in 0usize..20, k in 0usize..20) {
            prop_assume!(i != j && j != k && i != k);
            let t = PredicateTree::default_tree();
            let n = t.nodes();
            let (a, b, c) = (&n[i], &n[j], &n[k]);
            let r = tree_rank(&t, a, b, c).unwrap();
            prop_assert_eq!(&r, &tree_rank(&t, c, a, b).unwrap());
            prop_assert_eq!(&r, &tree_rank(&t, b, c, a).unwrap());
            prop_assert!(t.depth(&r.least).unwrap() <= t.depth(&r.middle).unwrap());
            prop_assert!(t.depth(&r.middle).unwrap() <= t.depth(&r.most).unwrap());
            let v = tree_triplet(&t, a, b, c).unwrap();
            prop_assert_eq!(&v, &tree_triplet(&t, a, c, b).unwrap());
            prop_assert!(t.distance(a, &v.positive).unwrap() <= t.distance(a, &v.negative).unwrap());
        }
    }
}
