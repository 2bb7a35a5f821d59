//! Detection, token-localization and box heads, plus box decoding.

use candle_core::{DType, Module, Tensor, D};
use candle_nn::{Init, Linear, VarBuilder};
use serde::{Deserialize, Serialize};

use crate::annotation::visual_iou;
use crate::data::BoundingBox;
use crate::error::{Error, Result};
use crate::metrics::ScoredBox;

/// IoU above which the lower-scored of two boxes is suppressed.
pub const NMS_IOU: f64 = 0.65;

/// Initial objectness bias, `sigmoid(-4.6) ≈ 0.01`.
const OBJECTNESS_PRIOR: f64 = -4.6;

/// Raw box distances are clamped before `exp` so that a bad step cannot
/// overflow.
const MAX_LOG_DISTANCE: f64 = 6.0;

/// Mean pool of the last stage, affine, sigmoid.
#[derive(Debug, Clone)]
pub struct DetectHead {
    linear: Linear,
}

impl DetectHead {
    pub fn new(channels: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            linear: candle_nn::linear(channels, 1, vb)?,
        })
    }

    /// `(B, H, W, C)` to `(B)`.
    pub fn forward(&self, last_stage: &Tensor) -> Result<Tensor> {
        let pooled = last_stage.mean(1)?.mean(1)?;
        Ok(candle_nn::ops::sigmoid(&self.linear.forward(&pooled)?)?.squeeze(D::Minus1)?)
    }
}

/// Per-cell affine + sigmoid on the token features.
#[derive(Debug, Clone)]
pub struct TokenHead {
    linear: Linear,
}

impl TokenHead {
    pub fn new(width: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            linear: candle_nn::linear(width, 1, vb)?,
        })
    }

    /// `(B, L, L, d)` to raster-ordered `(B, L²)`.
    pub fn forward(&self, token_features: &Tensor) -> Result<Tensor> {
        let (b, l, _, d) = token_features.dims4()?;
        let x = token_features.reshape((b, l * l, d))?;
        Ok(candle_nn::ops::sigmoid(&self.linear.forward(&x)?)?.squeeze(D::Minus1)?)
    }
}

/// Output of one box-head scale.
#[derive(Debug, Clone)]
pub struct BoxLevel {
    /// `(B, H, W)` in `[0, 1]`.
    pub objectness: Tensor,
    /// `(B, H, W, 4)` corner boxes in model-input pixels.
    pub boxes: Tensor,
    /// Pixels per cell.
    pub stride: f64,
}

impl BoxLevel {
    pub fn grid(&self) -> Result<(usize, usize)> {
        let (_, h, w) = self.objectness.dims3()?;
        Ok((h, w))
    }
}

/// Anchor-free decoupled branch for one scale: shared stem, then separate
/// objectness and distance outputs.
#[derive(Debug, Clone)]
struct BoxBranch {
    stem: Linear,
    obj: Linear,
    reg: Linear,
    stride: f64,
}

impl BoxBranch {
    fn new(channels: usize, hidden: usize, stride: f64, vb: VarBuilder) -> Result<Self> {
        let stem = candle_nn::linear(channels, hidden, vb.pp("stem"))?;
        let obj_w = vb.pp("obj").get_with_hints((1, hidden), "weight", Init::Randn { mean: 0.0, stdev: 0.01 })?;
        let obj_b = vb.pp("obj").get_with_hints(1, "bias", Init::Const(OBJECTNESS_PRIOR))?;
        let reg = candle_nn::linear(hidden, 4, vb.pp("reg"))?;
        Ok(Self {
            stem,
            obj: Linear::new(obj_w, Some(obj_b)),
            reg,
            stride,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<BoxLevel> {
        let (_, h, w, _) = x.dims4()?;
        let hidden = candle_nn::ops::silu(&self.stem.forward(x)?)?;
        let objectness = candle_nn::ops::sigmoid(&self.obj.forward(&hidden)?)?.squeeze(D::Minus1)?;
        let dist = (self
            .reg
            .forward(&hidden)?
            .clamp(-MAX_LOG_DISTANCE, MAX_LOG_DISTANCE)?
            .exp()?
            * self.stride)?;

        // cell centres, (H, W, 2) as (cx, cy)
        let s = self.stride;
        let mut centres = Vec::with_capacity(h * w * 2);
        for i in 0..h {
            for j in 0..w {
                centres.push((j as f64 + 0.5) * s);
                centres.push((i as f64 + 0.5) * s);
            }
        }
        let centres = Tensor::from_vec(centres, (h, w, 2), x.device())?.to_dtype(x.dtype())?;
        let lt = dist.narrow(D::Minus1, 0, 2)?;
        let rb = dist.narrow(D::Minus1, 2, 2)?;
        let top_left = lt.neg()?.broadcast_add(&centres)?;
        let bottom_right = rb.broadcast_add(&centres)?;
        let boxes = Tensor::cat(&[top_left, bottom_right], D::Minus1)?;
        Ok(BoxLevel {
            objectness,
            boxes,
            stride: s,
        })
    }
}

/// Box head over two backbone scales.
#[derive(Debug, Clone)]
pub struct BoxHead {
    branches: Vec<(usize, BoxBranch)>,
}

impl BoxHead {
    /// `stages` lists `(stage index, channels, stride in pixels)`.
    pub fn new(stages: &[(usize, usize, f64)], hidden: usize, vb: VarBuilder) -> Result<Self> {
        let branches = stages
            .iter()
            .map(|&(s, c, stride)| Ok((s, BoxBranch::new(c, hidden, stride, vb.pp(format!("level{s}")))?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { branches })
    }

    pub fn forward(&self, stages: &[Tensor]) -> Result<Vec<BoxLevel>> {
        self.branches
            .iter()
            .map(|(s, b)| {
                let x = stages
                    .get(*s)
                    .ok_or_else(|| Error::Shape(format!("backbone has no stage {s}")))?;
                b.forward(x)
            })
            .collect()
    }
}

/// Per-sample model output in original image coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionBundle {
    pub id: String,
    pub sarcasm_prob: f64,
    /// One probability per unpadded token.
    pub token_probs: Vec<f64>,
    pub boxes: Vec<ScoredBox>,
}

impl PredictionBundle {
    /// Token indices with probability at least `threshold`.
    pub fn positive_tokens(&self, threshold: f64) -> Vec<usize> {
        self.token_probs
            .iter()
            .enumerate()
            .filter(|(_, p)| **p >= threshold)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Greedy non-maximum suppression, highest score first.
pub fn nms(mut boxes: Vec<ScoredBox>, iou: f64) -> Vec<ScoredBox> {
    boxes.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut kept: Vec<ScoredBox> = Vec::new();
    for b in boxes {
        if kept.iter().all(|k| visual_iou(&k.bbox, &b.bbox) <= iou) {
            kept.push(b);
        }
    }
    kept
}

/// Turns the box levels of batch item `b` into scored boxes in an image of
/// `orig` pixels (`model_size` is the square input side). Boxes are
/// clipped to the image, filtered by `conf_threshold` and suppressed.
pub fn decode_boxes(
    levels: &[BoxLevel],
    b: usize,
    model_size: usize,
    orig: (u32, u32),
    conf_threshold: f64,
) -> Result<Vec<ScoredBox>> {
    let sx = orig.0 as f64 / model_size as f64;
    let sy = orig.1 as f64 / model_size as f64;
    let (w, h) = (orig.0 as f64, orig.1 as f64);
    let mut out = Vec::new();
    for level in levels {
        let obj: Vec<f64> = level.objectness.get(b)?.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
        let boxes: Vec<f64> = level.boxes.get(b)?.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
        for (k, &score) in obj.iter().enumerate() {
            if score < conf_threshold {
                continue;
            }
            let c = &boxes[4 * k..4 * k + 4];
            let x0 = (c[0] * sx).clamp(0.0, w);
            let y0 = (c[1] * sy).clamp(0.0, h);
            let x1 = (c[2] * sx).clamp(0.0, w);
            let y1 = (c[3] * sy).clamp(0.0, h);
            if let Ok(bbox) = BoundingBox::from_corners(x0, y0, x1, y1) {
                out.push(ScoredBox { bbox, score });
            }
        }
    }
    Ok(nms(out, NMS_IOU))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::seeded_var_builder;
    use candle_core::Device;
    use candle_nn::VarMap;

    fn sb(x: f64, y: f64, w: f64, h: f64, score: f64) -> ScoredBox {
        ScoredBox {
            bbox: BoundingBox::new(x, y, w, h).unwrap(),
            score,
        }
    }

    #[test]
    fn nms_keeps_one_of_duplicates() {
        let kept = nms(vec![sb(0., 0., 10., 10., 0.6), sb(0., 0., 10., 10., 0.9), sb(50., 50., 5., 5., 0.3)], NMS_IOU);
        assert_eq!(kept.len(), 2);
        assert_eq!(kept[0].score, 0.9);
    }

    #[test]
    fn zero_features_give_half() {
        let vm = VarMap::new();
        let vb = VarBuilder::from_varmap(&vm, DType::F32, &Device::Cpu);
        let det = DetectHead::new(4, vb.pp("det")).unwrap();
        let tok = TokenHead::new(4, vb.pp("tok")).unwrap();
        for (name, var) in vm.data().lock().unwrap().iter() {
            if name.ends_with("bias") {
                var.set(&var.as_tensor().zeros_like().unwrap()).unwrap();
            }
        }
        let x = Tensor::zeros((2, 3, 3, 4), DType::F32, &Device::Cpu).unwrap();
        let p = det.forward(&x).unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
        let t = tok.forward(&x).unwrap();
        assert_eq!(t.dims(), &[2, 9]);
        assert!(t.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().all(|v| *v == 0.5));
    }

    #[test]
    fn decoded_boxes_are_clipped_and_thresholded() {
        let vm = VarMap::new();
        let head = BoxHead::new(&[(1, 8, 8.0)], 8, seeded_var_builder(&vm, 3, DType::F32, &Device::Cpu)).unwrap();
        let x = Tensor::randn(0f32, 1.0, (1, 4, 4, 8), &Device::Cpu).unwrap();
        let levels = head.forward(&[x.clone(), x]).unwrap();
        assert_eq!(levels[0].boxes.dims(), &[1, 4, 4, 4]);
        // the objectness prior keeps everything below 0.5
        assert!(decode_boxes(&levels, 0, 32, (64, 48), 0.5).unwrap().is_empty());
        let all = decode_boxes(&levels, 0, 32, (64, 48), 0.0).unwrap();
        assert!(!all.is_empty());
        for b in &all {
            assert!(b.bbox.within(64, 48));
        }
    }
}
