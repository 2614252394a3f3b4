use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::scenes::SplitTag;

use super::{EpochLoss, PreparedExample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateAccuracy {
    pub state: String,
    pub split_tag: SplitTag,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

/// Example-weighted accuracy over a group of states; `None` for an empty group.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupAccuracy {
    pub correct: usize,
    pub total: usize,
    pub accuracy: Option<f64>,
}

impl GroupAccuracy {
    fn over<'a>(states: impl Iterator<Item = &'a StateAccuracy>) -> Self {
        let (correct, total) = states.fold((0, 0), |(c, n), s| (c + s.correct, n + s.total));
        GroupAccuracy { correct, total, accuracy: (total > 0).then(|| correct as f64 / total as f64) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub examples: usize,
    pub per_state: Vec<StateAccuracy>,
    pub id: GroupAccuracy,
    pub ood_all: GroupAccuracy,
    pub ood_unseen_combo: GroupAccuracy,
    pub ood_novel_pred: GroupAccuracy,
    /// ID minus OOD accuracy when both groups are present.
    pub id_minus_ood: Option<f64>,
    pub loss_curve: Vec<EpochLoss>,
}

/// Probability above 0.5 predicts True; exactly 0.5 predicts False.
pub(crate) fn predict(logit: f64) -> bool {
    logit > 0.0
}

impl MetricsReport {
    pub(crate) fn from_logits(examples: &[PreparedExample], logits: &[f64], loss_curve: Vec<EpochLoss>) -> Self {
        let mut states: BTreeMap<&str, StateAccuracy> = BTreeMap::new();
        for (e, &z) in examples.iter().zip(logits) {
            let s = states.entry(&e.state).or_insert_with(|| StateAccuracy {
                state: e.state.clone(),
                split_tag: e.split_tag,
                correct: 0,
                total: 0,
                accuracy: 0.0,
            });
            s.total += 1;
            s.correct += usize::from(predict(z) == e.label);
        }
        let per_state: Vec<StateAccuracy> = states
            .into_values()
            .map(|mut s| {
                s.accuracy = s.correct as f64 / s.total as f64;
                s
            })
            .collect();
        let group = |f: &dyn Fn(SplitTag) -> bool| GroupAccuracy::over(per_state.iter().filter(|s| f(s.split_tag)));
        let all = GroupAccuracy::over(per_state.iter());
        let id = group(&|t| t == SplitTag::Id);
        let ood_all = group(&|t| t != SplitTag::Id);
        let id_minus_ood = id.accuracy.zip(ood_all.accuracy).map(|(a, b)| a - b);
        MetricsReport {
            accuracy: all.accuracy.unwrap_or(0.0),
            examples: all.total,
            ood_unseen_combo: group(&|t| t == SplitTag::OodUnseenCombo),
            ood_novel_pred: group(&|t| t == SplitTag::OodNovelPred),
            id,
            ood_all,
            id_minus_ood,
            per_state,
            loss_curve,
        }
    }

    /// Text table in the All / Unseen Comb. / Novel Pred. layout.
    pub fn breakdown(&self) -> String {
        let f = |g: &GroupAccuracy| g.accuracy.map_or("-".to_string(), |a| format!("{a:.3}"));
        let mut s = format!("{:<8}{:>8}{:>15}{:>13}\n", "", "All", "Unseen Comb.", "Novel Pred.");
        s += &format!(
            "{:<8}{:>8}{:>15}{:>13}\n",
            "OOD",
            f(&self.ood_all),
            f(&self.ood_unseen_combo),
            f(&self.ood_novel_pred)
        );
        s += &format!("{:<8}{:>8}\n", "ID", f(&self.id));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::pred;
    use crate::scenes::Scene;

    fn ex(state: &str, tag: SplitTag, label: bool) -> PreparedExample {
        PreparedExample {
            scene: Scene { objects: Vec::new(), seed: 0 },
            objects: Vec::new(),
            text: crate::numcore::Tensor::zeros(&[1]),
            label,
            predicate: pred("Open"),
            state: state.into(),
            split_tag: tag,
        }
    }

    fn balanced() -> Vec<PreparedExample> {
        let mut v = Vec::new();
        for (s, tag) in [("A", SplitTag::Id), ("B", SplitTag::OodUnseenCombo), ("C", SplitTag::OodNovelPred)] {
            for i in 0..6 {
                v.push(ex(s, tag, i % 2 == 0));
            }
        }
        v
    }

    #[test]
    fn constant_half_predictor_scores_half() {
        let data = balanced();
        let r = MetricsReport::from_logits(&data, &vec![0.0; data.len()], Vec::new());
        assert_eq!(r.accuracy, 0.5);
        assert_eq!(r.id.accuracy, Some(0.5));
        assert_eq!(r.id_minus_ood, Some(0.0));
    }

    #[test]
    fn perfect_predictor_scores_one() {
        let data = balanced();
        let logits: Vec<f64> = data.iter().map(|e| if e.label { 3.0 } else { -3.0 }).collect();
        let r = MetricsReport::from_logits(&data, &logits, Vec::new());
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.ood_novel_pred.accuracy, Some(1.0));
    }

    #[test]
    fn groups_are_count_weighted() {
        let mut data = balanced();
        data.extend((0..4).map(|_| ex("D", SplitTag::OodUnseenCombo, true)));
        let logits: Vec<f64> = data.iter().map(|e| if e.state == "D" { 1.0 } else { -1.0 }).collect();
        let r = MetricsReport::from_logits(&data, &logits, Vec::new());
        // B: 3/6, C: 3/6, D: 4/4
        assert_eq!(r.ood_all.accuracy, Some(10.0 / 16.0));
        assert_eq!(r.ood_unseen_combo.accuracy, Some(7.0 / 10.0));
        for s in &r.per_state {
            assert!((0.0..=1.0).contains(&s.accuracy));
        }
        assert!(r.breakdown().contains("Unseen Comb."));
    }
}
