use rand::seq::index;
use rand::Rng;

use crate::oracle::{PredicateName, RelationCache};

use super::TrainError;

/// Batch indices of one oracle-resolved triple.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampledTriplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
    /// Least, middle and most specific.
    pub ranked: [usize; 3],
}

/// Samples up to `max` index triples whose predicates are pairwise distinct,
/// uniformly without replacement, and resolves each through the relation
/// cache. Batches with fewer than three distinct predicates yield nothing.
pub fn sample_triplets<R: Rng>(
    tags: &[PredicateName],
    relations: &RelationCache,
    rng: &mut R,
    max: usize,
) -> Result<Vec<SampledTriplet>, TrainError> {
    let n = tags.len();
    let mut valid = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if tags[i] == tags[j] {
                continue;
            }
            for k in j + 1..n {
                if tags[k] != tags[i] && tags[k] != tags[j] {
                    valid.push([i, j, k]);
                }
            }
        }
    }
    if valid.is_empty() || max == 0 {
        return Ok(Vec::new());
    }
    let picks = index::sample(rng, valid.len(), max.min(valid.len()));
    picks
        .into_iter()
        .map(|p| {
            let idx = valid[p];
            let e = relations.lookup([&tags[idx[0]], &tags[idx[1]], &tags[idx[2]]])?;
            let find = |name: &PredicateName| idx.into_iter().find(|&i| &tags[i] == name).expect("name in triple");
            Ok(SampledTriplet {
                anchor: find(&e.anchor),
                positive: find(&e.positive),
                negative: find(&e.negative),
                ranked: [find(&e.least), find(&e.middle), find(&e.most)],
            })
        })
        .collect()
}
