use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::scenes::{dataset_digest, Dataset, SplitTag};

use super::train::{adapt_few_shot, build_relations, predict_logits, test_examples, train_with_relations};
use super::{Ablation, MetricsReport, RunConfig, TrainError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LadderRow {
    pub name: String,
    pub ablation: Ablation,
    /// Evaluation straight after training.
    pub zero_shot: MetricsReport,
    /// Novel-predicate states scored after few-shot adaptation, all other
    /// states straight after training.
    pub report: MetricsReport,
    pub dataset_digest: String,
}

/// The five variants, each adding one component to the previous row.
pub fn ladder_variants() -> [(&'static str, Ablation); 5] {
    let sup = Ablation::supervised_only();
    let mask = Ablation { no_object_mask: false, ..sup };
    let trip = Ablation { no_triplet: false, ..mask };
    let reg = Ablation { no_norm_reg: false, ..trip };
    let hyp = Ablation { euclidean_metric: false, ..reg };
    [
        ("Supervised", sup),
        ("+ Object mask", mask),
        ("+ Triplet loss", trip),
        ("+ Norm reg", reg),
        ("+ Hyperbolic metric", hyp),
    ]
}

/// Trains, adapts and evaluates every ladder variant on the same data and
/// relations; only the ablation flags differ between rows. Adaptation only
/// ever sees novel predicates, so it is scored on those alone.
pub fn run_ablation_ladder(cfg: &RunConfig, dataset: &Dataset) -> Result<Vec<LadderRow>, TrainError> {
    cfg.validate()?;
    let relations = build_relations(cfg, dataset)?;
    let digest = dataset_digest(dataset);
    let tests = test_examples(dataset);
    let mut rows = Vec::with_capacity(5);
    for (name, ablation) in ladder_variants() {
        log::info!("ladder row `{name}`");
        let row_cfg = RunConfig { ablation, ..cfg.clone() };
        let (ckpt, zero_shot) = train_with_relations(&row_cfg, dataset, &relations)?;
        let adapted = adapt_few_shot(&ckpt, &dataset.fewshot, cfg.fewshot.shots, cfg.fewshot.epochs, &relations)?;
        let (trained, adapted) = (ckpt.model(), adapted.model());
        let prepared = trained.prepare_all(&tests)?;
        let before = predict_logits(&trained, &prepared, cfg.exec);
        let after = predict_logits(&adapted, &prepared, cfg.exec);
        let logits: Vec<f64> = prepared
            .iter()
            .enumerate()
            .map(|(i, e)| if e.split_tag == SplitTag::OodNovelPred { after[i] } else { before[i] })
            .collect();
        let report = MetricsReport::from_logits(&prepared, &logits, ckpt.loss_curve.clone());
        rows.push(LadderRow { name: name.to_string(), ablation, zero_shot, report, dataset_digest: digest.clone() });
    }
    Ok(rows)
}

pub fn ladder_table(rows: &[LadderRow]) -> String {
    let f = |x: Option<f64>| x.map_or("-".to_string(), |a| format!("{a:.3}"));
    let mut s = format!("{:<22}{:>8}{:>8}{:>9}{:>10}\n", "Variant", "ID", "OOD", "ID-OOD", "Novel");
    for r in rows {
        let m = &r.report;
        let _ = writeln!(
            s,
            "{:<22}{:>8}{:>8}{:>9}{:>10}",
            r.name,
            f(m.id.accuracy),
            f(m.ood_all.accuracy),
            f(m.id_minus_ood),
            f(m.ood_novel_pred.accuracy)
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ladder_order_and_flags() {
        let v = ladder_variants();
        assert_eq!(v[0].1, Ablation::supervised_only());
        assert!(v[1].1.no_triplet && !v[1].1.no_object_mask && v[1].1.euclidean_metric);
        assert!(!v[2].1.no_triplet && v[2].1.no_norm_reg);
        assert!(!v[3].1.no_norm_reg && v[3].1.euclidean_metric);
        assert_eq!(v[4].1, Ablation::default());
    }
}
