//! Training losses: BCE for detection and tokens, CIoU plus objectness BCE
//! for boxes.

use std::f64::consts::PI;

use candle_core::{Tensor, D};

use crate::error::{Error, Result};
use crate::model::{BoxLevel, ModelOutputs};
use crate::nn::{atan, bce};

/// Keeps divisions finite for degenerate boxes.
const EPS: f64 = 1e-9;

/// Supervision for one batch.
#[derive(Debug, Clone)]
pub struct Targets {
    /// `(B)`, 1 for sarcastic.
    pub labels: Tensor,
    /// Present when every sample of the batch carries gold localization.
    pub localization: Option<LocalizationTargets>,
}

#[derive(Debug, Clone)]
pub struct LocalizationTargets {
    /// `(B, L²)`, 1 on tokens inside a gold span.
    pub tokens: Tensor,
    /// `(B, L²)`, 1 on real tokens.
    pub token_mask: Tensor,
    /// Gold boxes per sample as `[x0, y0, x1, y1]` in model-input pixels.
    pub boxes: Vec<Vec<[f64; 4]>>,
}

#[derive(Debug, Clone)]
pub struct Losses {
    pub detection: Tensor,
    pub token: Option<Tensor>,
    pub boxes: Option<Tensor>,
}

impl Losses {
    pub fn scalars(&self) -> Result<(f64, Option<f64>, Option<f64>)> {
        let s = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?) };
        Ok((
            s(&self.detection)?,
            self.token.as_ref().map(s).transpose()?,
            self.boxes.as_ref().map(s).transpose()?,
        ))
    }
}

/// Mean BCE between sarcasm probabilities and labels.
pub fn detection_loss(prob: &Tensor, labels: &Tensor) -> Result<Tensor> {
    Ok(bce(prob, labels)?.mean_all()?)
}

/// BCE averaged over the real tokens of each sample, then over samples.
pub fn token_loss(probs: &Tensor, targets: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let per_cell = bce(probs, targets)?.mul(mask)?;
    let counts = mask.sum(1)?.clamp(1.0, f64::INFINITY)?;
    Ok(per_cell.sum(1)?.div(&counts)?.mean_all()?)
}

/// Complete-IoU loss per row of two `(K, 4)` corner-box tensors:
/// `1 − IoU + ρ²/c² + αv`. The trade-off weight `α` stays in the graph, so
/// the gradient is the exact derivative of the returned value.
pub fn ciou_loss(pred: &Tensor, gold: &Tensor) -> Result<Tensor> {
    let col = |t: &Tensor, i: usize| t.narrow(D::Minus1, i, 1).and_then(|c| c.squeeze(D::Minus1));
    let (px0, py0, px1, py1) = (col(pred, 0)?, col(pred, 1)?, col(pred, 2)?, col(pred, 3)?);
    let (gx0, gy0, gx1, gy1) = (col(gold, 0)?, col(gold, 1)?, col(gold, 2)?, col(gold, 3)?);

    let pw = (&px1 - &px0)?;
    let ph = (&py1 - &py0)?;
    let gw = (&gx1 - &gx0)?;
    let gh = (&gy1 - &gy0)?;

    let iw = (px1.minimum(&gx1)? - px0.maximum(&gx0)?)?.relu()?;
    let ih = (py1.minimum(&gy1)? - py0.maximum(&gy0)?)?.relu()?;
    let inter = (iw * ih)?;
    let union = ((&pw * &ph)? + (&gw * &gh)? - &inter)?;
    let iou = inter.div(&union.clamp(EPS, f64::MAX)?)?;

    let dx = ((&px0 + &px1)? - (&gx0 + &gx1)?)?.affine(0.5, 0.0)?;
    let dy = ((&py0 + &py1)? - (&gy0 + &gy1)?)?.affine(0.5, 0.0)?;
    let rho2 = (dx.sqr()? + dy.sqr()?)?;
    let cw = (px1.maximum(&gx1)? - px0.minimum(&gx0)?)?;
    let ch = (py1.maximum(&gy1)? - py0.minimum(&gy0)?)?;
    let c2 = (cw.sqr()? + ch.sqr()?)?.clamp(EPS, f64::MAX)?;

    let ratio = |w: &Tensor, h: &Tensor| -> Result<Tensor> { Ok(atan(&w.div(&(h + EPS)?)?)?) };
    let v = ((ratio(&gw, &gh)? - ratio(&pw, &ph)?)?.sqr()? * (4.0 / (PI * PI)))?;
    let one_minus_iou = iou.affine(-1.0, 1.0)?;
    let alpha = v.div(&((&one_minus_iou + &v)? + EPS)?)?;

    Ok(((one_minus_iou + rho2.div(&c2)?)? + alpha.mul(&v)?)?)
}

/// Cells responsible for each gold box at one scale: the cell holding the
/// box centre, clamped to the grid. Returns flat `b·H·W + i·W + j` indices
/// and the matching boxes.
pub fn assign_cells(level: &BoxLevel, boxes: &[Vec<[f64; 4]>]) -> Result<(Vec<u32>, Vec<[f64; 4]>)> {
    let (h, w) = level.grid()?;
    let mut idx = Vec::new();
    let mut gold = Vec::new();
    for (b, sample) in boxes.iter().enumerate() {
        for bx in sample {
            let cx = 0.5 * (bx[0] + bx[2]);
            let cy = 0.5 * (bx[1] + bx[3]);
            let j = ((cx / level.stride).floor().max(0.0) as usize).min(w - 1);
            let i = ((cy / level.stride).floor().max(0.0) as usize).min(h - 1);
            idx.push((b * h * w + i * w + j) as u32);
            gold.push(*bx);
        }
    }
    Ok((idx, gold))
}

/// Mean CIoU over assigned cells plus mean objectness BCE over all cells,
/// averaged across scales.
pub fn box_loss(levels: &[BoxLevel], boxes: &[Vec<[f64; 4]>]) -> Result<Tensor> {
    if levels.is_empty() {
        return Err(Error::invalid("no box levels"));
    }
    let mut total: Option<Tensor> = None;
    for level in levels {
        let (b, h, w) = level.objectness.dims3()?;
        if b != boxes.len() {
            return Err(Error::Shape(format!("{} box lists for batch of {b}", boxes.len())));
        }
        let dev = level.objectness.device();
        let dtype = level.objectness.dtype();
        let (idx, gold) = assign_cells(level, boxes)?;

        let mut obj_target = vec![0f64; b * h * w];
        for &k in &idx {
            obj_target[k as usize] = 1.0;
        }
        let obj_target = Tensor::from_vec(obj_target, (b, h, w), dev)?.to_dtype(dtype)?;
        let mut loss = bce(&level.objectness, &obj_target)?.mean_all()?;

        if !idx.is_empty() {
            let k = idx.len();
            let index = Tensor::from_vec(idx, k, dev)?;
            let pred = level.boxes.reshape((b * h * w, 4))?.index_select(&index, 0)?;
            let gold: Vec<f64> = gold.iter().flatten().copied().collect();
            let gold = Tensor::from_vec(gold, (k, 4), dev)?.to_dtype(dtype)?;
            loss = (loss + ciou_loss(&pred, &gold)?.mean_all()?)?;
        }
        total = Some(match total {
            Some(t) => (t + loss)?,
            None => loss,
        });
    }
    Ok((total.expect("at least one level") / levels.len() as f64)?)
}

/// All three losses. Localization losses are computed only when the
/// targets carry gold localization.
pub fn compute_losses(out: &ModelOutputs, targets: &Targets) -> Result<Losses> {
    let detection = detection_loss(&out.sarcasm_prob, &targets.labels)?;
    let (token, boxes) = match &targets.localization {
        Some(loc) => (
            Some(token_loss(&out.token_probs, &loc.tokens, &loc.token_mask)?),
            Some(box_loss(&out.box_levels, &loc.boxes)?),
        ),
        None => (None, None),
    };
    Ok(Losses { detection, token, boxes })
}
