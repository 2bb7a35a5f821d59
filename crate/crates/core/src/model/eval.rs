//! Scoring prediction bundles against gold records.

use std::collections::HashMap;

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::data::{BoundingBox, DatasetRecord};
use crate::error::{Error, Result};
use crate::metrics::{
    average_precision, detection_metrics, f1_at_iou, text_localization, EmOptions, MetricReport, ScoredBox,
    TokenPredictionSet,
};
use crate::model::PredictionBundle;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub em: EmOptions,
    /// Tokens at or above this probability are predicted sarcastic.
    pub token_threshold: f64,
    /// Box confidence cutoff for F1.
    pub box_conf_threshold: f64,
    /// Sarcasm probability cutoff for detection metrics.
    pub detection_cutoff: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            em: EmOptions::default(),
            token_threshold: 0.5,
            box_conf_threshold: 0.5,
            detection_cutoff: 0.5,
        }
    }
}

/// Full report over `gold`. Every gold record needs a prediction with the
/// same id. Localization metrics cover the records with gold annotations
/// and are absent when there are none.
pub fn evaluate(preds: &[PredictionBundle], gold: &[DatasetRecord], opts: &EvalOptions) -> Result<MetricReport> {
    if gold.is_empty() {
        return Err(Error::invalid("no gold records to evaluate"));
    }
    let by_id: HashMap<&str, &PredictionBundle> = preds.iter().map(|p| (p.id.as_str(), p)).collect();
    let paired: Vec<(&DatasetRecord, &PredictionBundle)> = gold
        .iter()
        .map(|r| {
            by_id
                .get(r.id.as_str())
                .map(|p| (r, *p))
                .ok_or_else(|| Error::validation(&r.id, "no prediction for record"))
        })
        .collect::<Result<_>>()?;

    let probs: Vec<f64> = paired.iter().map(|(_, p)| p.sarcasm_prob).collect();
    let labels: Vec<bool> = paired.iter().map(|(r, _)| r.sarcastic).collect();
    let det = detection_metrics(&probs, &labels, opts.detection_cutoff)?;
    let mut report = MetricReport {
        acc: Some(det.acc),
        precision: Some(det.precision),
        f1: Some(det.f1),
        ..Default::default()
    };

    let localized: Vec<_> = paired.iter().filter(|(r, _)| r.gold.is_some()).collect();
    let mut token_pairs = Vec::new();
    let mut box_preds: Vec<Vec<ScoredBox>> = Vec::new();
    let mut box_gold: Vec<Vec<BoundingBox>> = Vec::new();
    for (r, p) in &localized {
        let g = r.gold.as_ref().expect("filtered on gold");
        let n = p.token_probs.len();
        if n > r.token_count() {
            return Err(Error::validation(
                &r.id,
                format!("{n} token probabilities for {} tokens", r.token_count()),
            ));
        }
        if n > 0 {
            let pred_set = TokenPredictionSet::new(p.positive_tokens(opts.token_threshold), n)?;
            let gold_set = TokenPredictionSet::new(g.token_set().into_iter().filter(|&t| t < n), n)?;
            token_pairs.push((pred_set, gold_set));
        }
        box_preds.push(p.boxes.clone());
        box_gold.push(g.boxes.clone());
    }
    if !token_pairs.is_empty() {
        let t = text_localization(&token_pairs, opts.em)?;
        report.em = Some(t.em);
        report.em50 = Some(t.em50);
        report.em70 = Some(t.em70);
        report.bit_error = Some(t.bit_error);
    }
    if box_gold.iter().any(|g| !g.is_empty()) {
        report.ap50 = Some(average_precision(&box_preds, &box_gold, 0.5)?);
        report.ap60 = Some(average_precision(&box_preds, &box_gold, 0.6)?);
        report.f1_50 = Some(f1_at_iou(&box_preds, &box_gold, 0.5, opts.box_conf_threshold)?);
        report.f1_60 = Some(f1_at_iou(&box_preds, &box_gold, 0.6, opts.box_conf_threshold)?);
    }
    Ok(report)
}

/// Predictions that reproduce the gold annotations exactly.
pub fn oracle_predictions(gold: &[DatasetRecord]) -> Vec<PredictionBundle> {
    gold.iter()
        .map(|r| {
            let n = r.token_count();
            let set = r.gold.as_ref().map(|g| g.token_set()).unwrap_or_default();
            PredictionBundle {
                id: r.id.clone(),
                sarcasm_prob: if r.sarcastic { 1.0 } else { 0.0 },
                token_probs: (0..n).map(|t| if set.contains(&t) { 1.0 } else { 0.0 }).collect(),
                boxes: r
                    .gold
                    .iter()
                    .flat_map(|g| g.boxes.iter())
                    .map(|b| ScoredBox { bbox: *b, score: 1.0 })
                    .collect(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_fixtures;

    #[test]
    fn oracle_predictions_score_perfectly() {
        let fx = gen_fixtures(12, 5, 48);
        let preds = oracle_predictions(&fx.records);
        let r = evaluate(&preds, &fx.records, &EvalOptions::default()).unwrap();
        for (name, v) in MetricReport::FIELDS.iter().zip(r.values()) {
            let want = if *name == "bit_error" { 0.0 } else { 1.0 };
            assert_eq!(v, Some(want), "{name}");
        }
    }

    #[test]
    fn missing_prediction_is_reported() {
        let fx = gen_fixtures(3, 5, 48);
        let preds = oracle_predictions(&fx.records[..2]);
        let err = evaluate(&preds, &fx.records, &EvalOptions::default()).unwrap_err();
        assert!(err.to_string().contains(&fx.records[2].id));
    }

    #[test]
    fn detection_only_corpus_has_no_localization_fields() {
        let fx = gen_fixtures(6, 1, 48);
        let neg: Vec<_> = fx.records.into_iter().filter(|r| !r.sarcastic).collect();
        let r = evaluate(&oracle_predictions(&neg), &neg, &EvalOptions::default()).unwrap();
        assert!(r.em.is_none() && r.ap50.is_none());
        assert_eq!(r.acc, Some(1.0));
    }
}
