//! Evaluation measures for detection and localization.
//!
//! Textual localization uses token sets: EM requires the predicted set to
//! equal the gold set, EM50/EM70 accept a token-set IoU of at least 0.5/0.7,
//! and BitError is the share of misclassified tokens. Visual localization is
//! scored by AP and F1 at box-IoU thresholds; detection by accuracy,
//! precision and F1.

use std::collections::BTreeSet;

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::annotation::visual_iou;
use crate::data::BoundingBox;
use crate::error::{Error, Result};

/// Token indices marked sarcastic in a document of `n` tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenPredictionSet {
    pub positives: BTreeSet<usize>,
    pub n: usize,
}

impl TokenPredictionSet {
    pub fn new(positives: impl IntoIterator<Item = usize>, n: usize) -> Result<Self> {
        let positives: BTreeSet<usize> = positives.into_iter().collect();
        if let Some(&bad) = positives.iter().find(|&&i| i >= n) {
            return Err(Error::invalid(format!("token index {bad} out of range for {n} tokens")));
        }
        Ok(Self { positives, n })
    }

    pub fn is_empty(&self) -> bool {
        self.positives.is_empty()
    }

    fn iou(&self, other: &Self) -> f64 {
        let inter = self.positives.intersection(&other.positives).count();
        let union = self.positives.union(&other.positives).count();
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }
}

/// Toggles for the points the textual metrics leave open.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct EmOptions {
    /// Require IoU strictly above the threshold instead of at least it.
    pub strict_inequality: bool,
    /// Count samples with an empty prediction but non-empty gold as misses
    /// instead of leaving them out of the denominator.
    pub count_empty_predictions: bool,
}

/// Per-sample match at an overlap threshold (1.0 means exact equality).
pub fn exact_match_at(
    pred: &TokenPredictionSet,
    gold: &TokenPredictionSet,
    threshold: f64,
    opts: EmOptions,
) -> Result<bool> {
    if pred.n != gold.n {
        return Err(Error::invalid(format!(
            "prediction covers {} tokens, gold {}",
            pred.n, gold.n
        )));
    }
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::invalid(format!("threshold {threshold} outside (0, 1]")));
    }
    if threshold >= 1.0 {
        return Ok(pred.positives == gold.positives);
    }
    let iou = pred.iou(gold);
    Ok(if opts.strict_inequality {
        iou > threshold
    } else {
        iou >= threshold
    })
}

/// Share of tokens whose sarcastic/plain label differs.
pub fn bit_error(pred: &TokenPredictionSet, gold: &TokenPredictionSet) -> Result<f64> {
    if pred.n != gold.n {
        return Err(Error::invalid(format!(
            "prediction covers {} tokens, gold {}",
            pred.n, gold.n
        )));
    }
    if pred.n == 0 {
        return Err(Error::invalid("bit error of an empty document"));
    }
    let wrong = pred.positives.symmetric_difference(&gold.positives).count();
    Ok(wrong as f64 / pred.n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TextLocalizationScores {
    pub em: f64,
    pub em50: f64,
    pub em70: f64,
    pub bit_error: f64,
    /// Samples in the EM denominator.
    pub counted: usize,
}

/// Corpus-level EM/EM50/EM70 and mean BitError over `(prediction, gold)` pairs.
pub fn text_localization(
    samples: &[(TokenPredictionSet, TokenPredictionSet)],
    opts: EmOptions,
) -> Result<TextLocalizationScores> {
    let mut hits = [0usize; 3];
    let mut counted = 0usize;
    let mut bit_sum = 0.0;
    for (pred, gold) in samples {
        bit_sum += bit_error(pred, gold)?;
        let include = if pred.is_empty() {
            opts.count_empty_predictions && !gold.is_empty()
        } else {
            true
        };
        if !include {
            continue;
        }
        counted += 1;
        for (slot, t) in [1.0, 0.5, 0.7].into_iter().enumerate() {
            if exact_match_at(pred, gold, t, opts)? {
                hits[slot] += 1;
            }
        }
    }
    let frac = |h: usize| if counted == 0 { 0.0 } else { h as f64 / counted as f64 };
    Ok(TextLocalizationScores {
        em: frac(hits[0]),
        em50: frac(hits[1]),
        em70: frac(hits[2]),
        bit_error: if samples.is_empty() { 0.0 } else { bit_sum / samples.len() as f64 },
        counted,
    })
}

/// A predicted box with its confidence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub score: f64,
}

/// Greedy corpus matching: predictions by descending score, each taking the
/// unmatched gold box of its image with the highest IoU if that IoU reaches
/// the threshold. Returns TP flags in score order.
fn match_predictions(
    preds: &[Vec<ScoredBox>],
    golds: &[Vec<BoundingBox>],
    iou_threshold: f64,
) -> Result<Vec<(f64, bool)>> {
    if preds.len() != golds.len() {
        return Err(Error::invalid(format!(
            "{} prediction lists for {} images",
            preds.len(),
            golds.len()
        )));
    }
    let mut order: Vec<(usize, usize)> = preds
        .iter()
        .enumerate()
        .flat_map(|(img, ps)| (0..ps.len()).map(move |k| (img, k)))
        .collect();
    order.sort_by(|a, b| preds[b.0][b.1].score.total_cmp(&preds[a.0][a.1].score));

    let mut taken: Vec<Vec<bool>> = golds.iter().map(|g| vec![false; g.len()]).collect();
    let mut out = Vec::with_capacity(order.len());
    for (img, k) in order {
        let p = &preds[img][k];
        let mut best: Option<(usize, f64)> = None;
        for (g, gold) in golds[img].iter().enumerate() {
            if taken[img][g] {
                continue;
            }
            let iou = visual_iou(&p.bbox, gold);
            if iou >= iou_threshold && best.is_none_or(|(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        if let Some((g, _)) = best {
            taken[img][g] = true;
        }
        out.push((p.score, best.is_some()));
    }
    Ok(out)
}

/// All-point interpolated AP over the corpus.
pub fn average_precision(
    preds: &[Vec<ScoredBox>],
    golds: &[Vec<BoundingBox>],
    iou_threshold: f64,
) -> Result<f64> {
    let n_gold: usize = golds.iter().map(Vec::len).sum();
    if n_gold == 0 {
        return Err(Error::invalid("no gold boxes in corpus"));
    }
    let matches = match_predictions(preds, golds, iou_threshold)?;
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(matches.len());
    let mut precision = Vec::with_capacity(matches.len());
    for (i, &(_, hit)) in matches.iter().enumerate() {
        tp += hit as usize;
        recall.push(tp as f64 / n_gold as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    // precision envelope, right to left
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    Ok(ap)
}

/// F1 after dropping predictions below `conf_threshold`.
pub fn f1_at_iou(
    preds: &[Vec<ScoredBox>],
    golds: &[Vec<BoundingBox>],
    iou_threshold: f64,
    conf_threshold: f64,
) -> Result<f64> {
    let kept: Vec<Vec<ScoredBox>> = preds
        .iter()
        .map(|ps| ps.iter().filter(|p| p.score >= conf_threshold).copied().collect())
        .collect();
    let matches = match_predictions(&kept, golds, iou_threshold)?;
    let tp = matches.iter().filter(|m| m.1).count() as f64;
    let fp = matches.len() as f64 - tp;
    let n_gold: usize = golds.iter().map(Vec::len).sum();
    let fn_ = n_gold as f64 - tp;
    Ok(f1_from_counts(tp, fp, fn_))
}

fn f1_from_counts(tp: f64, fp: f64, fn_: f64) -> f64 {
    let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
    let r = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionScores {
    pub acc: f64,
    pub precision: f64,
    pub f1: f64,
}

/// Binary accuracy, precision and F1 with `prob >= cutoff` as positive.
pub fn detection_metrics(probs: &[f64], labels: &[bool], cutoff: f64) -> Result<DetectionScores> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(Error::invalid(format!(
            "need equal non-empty inputs, got {} probabilities and {} labels",
            probs.len(),
            labels.len()
        )));
    }
    let (mut tp, mut fp, mut fn_, mut correct) = (0.0, 0.0, 0.0, 0usize);
    for (&p, &y) in probs.iter().zip(labels) {
        let yhat = p >= cutoff;
        correct += (yhat == y) as usize;
        match (yhat, y) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fn_ += 1.0,
            _ => {}
        }
    }
    Ok(DetectionScores {
        acc: correct as f64 / probs.len() as f64,
        precision: if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 },
        f1: f1_from_counts(tp, fp, fn_),
    })
}

/// Every measure in one report. Fields that a run does not produce (for
/// instance box metrics of a detection-only run) stay `None` and are omitted
/// from the JSON.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub em: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub em50: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub em70: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bit_error: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ap50: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ap60: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f1_50: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f1_60: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub precision: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f1: Option<f64>,
}

impl MetricReport {
    pub const FIELDS: [&'static str; 11] = [
        "em", "em50", "em70", "bit_error", "ap50", "ap60", "f1_50", "f1_60", "acc", "precision", "f1",
    ];

    pub fn values(&self) -> [Option<f64>; 11] {
        [
            self.em,
            self.em50,
            self.em70,
            self.bit_error,
            self.ap50,
            self.ap60,
            self.f1_50,
            self.f1_60,
            self.acc,
            self.precision,
            self.f1,
        ]
    }

    pub fn from_values(v: [Option<f64>; 11]) -> Self {
        MetricReport {
            em: v[0],
            em50: v[1],
            em70: v[2],
            bit_error: v[3],
            ap50: v[4],
            ap60: v[5],
            f1_50: v[6],
            f1_60: v[7],
            acc: v[8],
            precision: v[9],
            f1: v[10],
        }
    }
}

/// Mean and (population) variance of each field across repeated runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seeds: Vec<u64>,
    pub mean: MetricReport,
    pub variance: MetricReport,
    pub runs: Vec<MetricReport>,
}

pub fn summarize_seeds(seeds: Vec<u64>, runs: Vec<MetricReport>) -> SeedSummary {
    let mut mean = [None; 11];
    let mut variance = [None; 11];
    for f in 0..11 {
        let vals: Vec<f64> = runs.iter().filter_map(|r| r.values()[f]).collect();
        if vals.is_empty() {
            continue;
        }
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
        mean[f] = Some(m);
        variance[f] = Some(v);
    }
    SeedSummary {
        seeds,
        mean: MetricReport::from_values(mean),
        variance: MetricReport::from_values(variance),
        runs,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(idx: &[usize], n: usize) -> TokenPredictionSet {
        TokenPredictionSet::new(idx.iter().copied(), n).unwrap()
    }

    fn bx(x: f64, y: f64, w: f64, h: f64) -> BoundingBox {
        BoundingBox::new(x, y, w, h).unwrap()
    }

    fn sb(b: BoundingBox, score: f64) -> ScoredBox {
        ScoredBox { bbox: b, score }
    }

    const OPTS: EmOptions = EmOptions {
        strict_inequality: false,
        count_empty_predictions: false,
    };

    #[test]
    fn em_thresholds() {
        let gold = set(&[3, 4, 5, 6, 7], 10);
        assert!(exact_match_at(&gold, &gold, 1.0, OPTS).unwrap());
        assert!(exact_match_at(&gold, &gold, 0.5, OPTS).unwrap());
        let pred = set(&[3, 4, 5], 10);
        assert!(exact_match_at(&pred, &gold, 0.5, OPTS).unwrap());
        assert!(!exact_match_at(&pred, &gold, 0.7, OPTS).unwrap());
        assert!(!exact_match_at(&pred, &gold, 1.0, OPTS).unwrap());
        let far = set(&[0, 1], 10);
        for t in [0.5, 0.7, 1.0] {
            assert!(!exact_match_at(&far, &gold, t, OPTS).unwrap());
        }
        assert!(exact_match_at(&pred, &set(&[], 9), 0.5, OPTS).is_err());
    }

    #[test]
    fn boundary_inequality_toggle() {
        let gold = set(&[0, 1, 2, 3], 8);
        let pred = set(&[0, 1], 8);
        let strict = EmOptions { strict_inequality: true, ..OPTS };
        assert!(exact_match_at(&pred, &gold, 0.5, OPTS).unwrap());
        assert!(!exact_match_at(&pred, &gold, 0.5, strict).unwrap());
    }

    #[test]
    fn bit_error_examples() {
        let gold = set(&[1, 2, 3], 20);
        assert!((bit_error(&set(&[1, 2, 3, 4, 5], 20), &gold).unwrap() - 0.10).abs() < 1e-12);
        assert_eq!(bit_error(&gold, &gold).unwrap(), 0.0);
        let complement: Vec<usize> = (0..20).filter(|i| !gold.positives.contains(i)).collect();
        assert_eq!(bit_error(&set(&complement, 20), &gold).unwrap(), 1.0);
        assert!(bit_error(&set(&[], 0), &set(&[], 0)).is_err());
    }

    #[test]
    fn empty_predictions_and_denominator() {
        let samples = vec![
            (set(&[1], 4), set(&[1], 4)),
            (set(&[], 4), set(&[2], 4)),
        ];
        let loose = text_localization(&samples, OPTS).unwrap();
        assert_eq!((loose.em, loose.counted), (1.0, 1));
        let strict = text_localization(&samples, EmOptions { count_empty_predictions: true, ..OPTS }).unwrap();
        assert_eq!((strict.em, strict.counted), (0.5, 2));
    }

    #[test]
    fn ap_exact_half_iou() {
        let golds = vec![vec![bx(0.0, 0.0, 10.0, 10.0)]];
        let preds = vec![vec![sb(bx(0.0, 0.0, 10.0, 5.0), 0.9)]];
        assert_eq!(visual_iou(&preds[0][0].bbox, &golds[0][0]), 0.5);
        assert_eq!(average_precision(&preds, &golds, 0.5).unwrap(), 1.0);
        assert_eq!(average_precision(&preds, &golds, 0.6).unwrap(), 0.0);
    }

    #[test]
    fn ap_perfect_and_empty() {
        let golds = vec![vec![bx(0.0, 0.0, 5.0, 5.0)], vec![bx(3.0, 3.0, 4.0, 6.0), bx(20.0, 1.0, 2.0, 2.0)]];
        let perfect: Vec<Vec<ScoredBox>> = golds.iter().map(|g| g.iter().map(|b| sb(*b, 0.8)).collect()).collect();
        assert_eq!(average_precision(&perfect, &golds, 0.5).unwrap(), 1.0);
        assert_eq!(average_precision(&perfect, &golds, 0.6).unwrap(), 1.0);
        let empty = vec![vec![], vec![]];
        assert_eq!(average_precision(&empty, &golds, 0.5).unwrap(), 0.0);
        assert!(average_precision(&empty, &[vec![], vec![]], 0.5).is_err());
    }

    #[test]
    fn ap_ranks_by_score() {
        // one FP ranked above one TP: precision envelope gives 0.5 at recall 1
        let golds = vec![vec![bx(0.0, 0.0, 10.0, 10.0)]];
        let preds = vec![vec![sb(bx(50.0, 50.0, 5.0, 5.0), 0.9), sb(bx(0.0, 0.0, 10.0, 10.0), 0.4)]];
        assert!((average_precision(&preds, &golds, 0.5).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn f1_examples() {
        let golds = vec![vec![bx(0.0, 0.0, 10.0, 10.0)]];
        let perfect = vec![vec![sb(golds[0][0], 0.9)]];
        assert_eq!(f1_at_iou(&perfect, &golds, 0.5, 0.5).unwrap(), 1.0);
        assert_eq!(f1_at_iou(&[vec![]], &golds, 0.5, 0.5).unwrap(), 0.0);
        let one_fp = vec![vec![sb(golds[0][0], 0.9), sb(bx(40.0, 40.0, 3.0, 3.0), 0.8)]];
        assert!((f1_at_iou(&one_fp, &golds, 0.5, 0.5).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        // confidence filter drops the FP
        assert_eq!(f1_at_iou(&one_fp, &golds, 0.5, 0.85).unwrap(), 1.0);
    }

    #[test]
    fn detection_examples() {
        let d = detection_metrics(&[0.9, 0.1], &[true, false], 0.5).unwrap();
        assert_eq!((d.acc, d.precision, d.f1), (1.0, 1.0, 1.0));
        let d = detection_metrics(&[0.1, 0.2, 0.3], &[true, false, true], 0.5).unwrap();
        assert_eq!(d.precision, 0.0);
        assert_eq!(d.f1, 0.0);
        let d = detection_metrics(&[0.9, 0.2, 0.8, 0.4], &[true, false, false, true], 0.5).unwrap();
        assert_eq!((d.acc, d.precision, d.f1), (0.5, 0.5, 0.5));
        assert!(detection_metrics(&[], &[], 0.5).is_err());
    }

    #[test]
    fn seed_summary_mean_and_variance() {
        let runs = vec![
            MetricReport { acc: Some(0.5), ..Default::default() },
            MetricReport { acc: Some(0.7), ..Default::default() },
        ];
        let s = summarize_seeds(vec![1, 2], runs);
        assert!((s.mean.acc.unwrap() - 0.6).abs() < 1e-12);
        assert!((s.variance.acc.unwrap() - 0.01).abs() < 1e-12);
        assert!(s.mean.em.is_none());
    }

    fn arb_box() -> impl Strategy<Value = BoundingBox> {
        (0u8..30, 0u8..30, 1u8..15, 1u8..15).prop_map(|(x, y, w, h)| bx(x as f64, y as f64, w as f64, h as f64))
    }

    fn arb_corpus() -> impl Strategy<Value = (Vec<Vec<ScoredBox>>, Vec<Vec<BoundingBox>>)> {
        prop::collection::vec(
            (
                prop::collection::vec((arb_box(), 0.0f64..1.0).prop_map(|(b, s)| sb(b, s)), 0..5),
                prop::collection::vec(arb_box(), 1..5),
            ),
            1..6,
        )
        .prop_map(|v| v.into_iter().unzip())
    }

    proptest! {
        #[test]
        fn bit_error_symmetric(a in prop::collection::btree_set(0usize..15, 0..15), b in prop::collection::btree_set(0usize..15, 0..15)) {
            let (pa, pb) = (set(&a.iter().copied().collect::<Vec<_>>(), 15), set(&b.iter().copied().collect::<Vec<_>>(), 15));
            prop_assert_eq!(bit_error(&pa, &pb).unwrap(), bit_error(&pb, &pa).unwrap());
            prop_assert_eq!(bit_error(&pa, &pb).unwrap() == 0.0, a == b);
        }

        #[test]
        fn ap_and_f1_non_increasing_in_iou((preds, golds) in arb_corpus()) {
            let ap50 = average_precision(&preds, &golds, 0.5).unwrap();
            let ap60 = average_precision(&preds, &golds, 0.6).unwrap();
            prop_assert!(ap60 <= ap50 + 1e-12);
            let f50 = f1_at_iou(&preds, &golds, 0.5, 0.3).unwrap();
            let f60 = f1_at_iou(&preds, &golds, 0.6, 0.3).unwrap();
            prop_assert!(f60 <= f50 + 1e-12);
            prop_assert!((0.0..=1.0).contains(&ap50));
        }
    }
}
