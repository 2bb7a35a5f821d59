//! Inter-annotator agreement.
//!
//! Each sarcastic sample is labeled by three annotators. Two annotations are
//! compared by the sum of a textual IoU over token spans and a visual IoU
//! over boxes; an annotation's confidence is the sum of its similarity to the
//! other two. The most confident annotation is kept, and the samples with the
//! lowest overall confidence are flagged as challenging.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{AnnotationSet, BoundingBox, TokenSpan};
use crate::error::{Error, Result};

/// Raw textual IoU of two spans with exclusive ends.
///
/// Disjoint spans give a negative value (the gap over the hull).
pub fn text_iou(a: &TokenSpan, b: &TokenSpan) -> f64 {
    let inter = a.end().min(b.end()) as f64 - a.start().max(b.start()) as f64;
    let hull = a.end().max(b.end()) as f64 - a.start().min(b.start()) as f64;
    inter / hull
}

/// Area IoU of two boxes; 0 when they do not overlap.
pub fn visual_iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = (a.x2().min(b.x2()) - a.x.max(b.x)).max(0.0);
    let ih = (a.y2().min(b.y2()) - a.y.max(b.y)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityScore {
    pub tiou: f64,
    pub viou: f64,
    pub total: f64,
}

/// Greedy one-to-one matching by descending score. Returns the mean score
/// over `max(len_a, len_b)` targets, unmatched targets counting as zero.
/// Both sides empty means the annotators agree there is nothing to mark.
fn greedy_mean<T>(a: &[T], b: &[T], score: impl Fn(&T, &T) -> f64) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(a.len() * b.len());
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            pairs.push((score(x, y), i, j));
        }
    }
    // stable: ties keep (i, j) order
    pairs.sort_by(|p, q| q.0.total_cmp(&p.0));
    let mut used_a = vec![false; a.len()];
    let mut used_b = vec![false; b.len()];
    let mut sum = 0.0;
    for (s, i, j) in pairs {
        if !used_a[i] && !used_b[j] {
            used_a[i] = true;
            used_b[j] = true;
            sum += s;
        }
    }
    sum / a.len().max(b.len()) as f64
}

/// Similarity of two non-empty annotations.
pub fn annotation_similarity(a: &AnnotationSet, b: &AnnotationSet) -> Result<SimilarityScore> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid(format!(
            "similarity undefined for empty annotation ({} vs {})",
            a.annotator_id, b.annotator_id
        )));
    }
    let tiou = greedy_mean(&a.spans, &b.spans, |x, y| text_iou(x, y).max(0.0));
    let viou = greedy_mean(&a.boxes, &b.boxes, visual_iou);
    Ok(SimilarityScore {
        tiou,
        viou,
        total: tiou + viou,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceReport {
    #[serde(default)]
    pub id: String,
    pub per_annotator: BTreeMap<String, f64>,
    pub best: String,
    /// Sum of the three pairwise similarity totals.
    pub sample_confidence: f64,
    #[serde(default)]
    pub challenging: bool,
}

/// Scores a triple of annotations for one sample.
pub fn confidence_scores(annots: &[AnnotationSet]) -> Result<ConfidenceReport> {
    if annots.len() != 3 {
        return Err(Error::invalid(format!(
            "expected exactly 3 annotations, got {}",
            annots.len()
        )));
    }
    // canonical order so the result does not depend on input order
    let mut sorted: Vec<&AnnotationSet> = annots.iter().collect();
    sorted.sort_by(|x, y| x.annotator_id.cmp(&y.annotator_id));
    if sorted.windows(2).any(|w| w[0].annotator_id == w[1].annotator_id) {
        return Err(Error::invalid("duplicate annotator id in triple"));
    }

    let mut per_annotator: BTreeMap<String, f64> =
        sorted.iter().map(|a| (a.annotator_id.clone(), 0.0)).collect();
    let mut sample_confidence = 0.0;
    for i in 0..3 {
        for j in i + 1..3 {
            let s = annotation_similarity(sorted[i], sorted[j])?.total;
            *per_annotator.get_mut(&sorted[i].annotator_id).unwrap() += s;
            *per_annotator.get_mut(&sorted[j].annotator_id).unwrap() += s;
            sample_confidence += s;
        }
    }

    // BTreeMap iterates by id, so strict `>` keeps the lowest id on ties
    let mut best: Option<(&String, f64)> = None;
    for (id, &c) in &per_annotator {
        if best.is_none_or(|(_, b)| c > b) {
            best = Some((id, c));
        }
    }
    let best = best.map(|(id, _)| id.clone()).unwrap_or_default();

    Ok(ConfidenceReport {
        id: String::new(),
        per_annotator,
        best,
        sample_confidence,
        challenging: false,
    })
}

/// Flags the `ceil(fraction * N)` reports with the lowest sample confidence
/// (ties broken by id) and clears the flag on all others.
pub fn flag_challenging(reports: &mut [ConfidenceReport], fraction: f64) -> Result<()> {
    if reports.is_empty() {
        return Err(Error::invalid("no reports to flag"));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::invalid(format!("fraction must be in (0, 1), got {fraction}")));
    }
    // guard against 0.05 * N landing a hair above an integer
    let k = ((fraction * reports.len() as f64) - 1e-9).ceil().max(1.0) as usize;
    let mut order: Vec<usize> = (0..reports.len()).collect();
    order.sort_by(|&i, &j| {
        reports[i]
            .sample_confidence
            .total_cmp(&reports[j].sample_confidence)
            .then_with(|| reports[i].id.cmp(&reports[j].id))
    });
    for r in reports.iter_mut() {
        r.challenging = false;
    }
    for &i in &order[..k] {
        reports[i].challenging = true;
    }
    Ok(())
}
