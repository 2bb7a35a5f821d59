//! Per-stage heatmaps of backbone activity blended over the input image.
//!
//! Each stage is summarized by the L2 norm of its feature vector at every
//! cell, min-max normalized and upsampled to the image size.

use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use image::imageops::FilterType;
use image::{GrayImage, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::model::train::{make_batch, Sample};
use crate::model::FusionModel;

/// Weight of the heatmap in the blend.
const ALPHA: f32 = 0.5;

/// Blue → cyan → yellow → red ramp for `t` in `[0, 1]`.
pub fn colormap(t: f32) -> Rgb<u8> {
    let t = t.clamp(0.0, 1.0);
    let stops = [(0.0, [0.0, 0.0, 0.5]), (0.35, [0.0, 0.8, 1.0]), (0.65, [1.0, 0.9, 0.0]), (1.0, [0.6, 0.0, 0.0])];
    let k = stops.iter().position(|s| t <= s.0).unwrap_or(stops.len() - 1).max(1);
    let (t0, c0) = stops[k - 1];
    let (t1, c1) = stops[k];
    let u = (t - t0) / (t1 - t0);
    let ch = |i: usize| ((c0[i] + u * (c1[i] - c0[i])) * 255.0).round() as u8;
    Rgb([ch(0), ch(1), ch(2)])
}

/// `(H, W)` feature norms of one stage output `(1, H, W, C)`, cropped to
/// the cells that cover the image.
pub fn stage_heat(stage: &Tensor, valid: usize) -> Result<Vec<Vec<f32>>> {
    let norms = stage.get(0)?.sqr()?.sum(2)?.sqrt()?.to_dtype(DType::F32)?;
    let rows: Vec<Vec<f32>> = norms.to_vec2()?;
    Ok(rows.into_iter().take(valid).map(|r| r.into_iter().take(valid).collect()).collect())
}

/// Normalizes `heat`, scales it to the image and blends it in.
pub fn overlay(image: &RgbImage, heat: &[Vec<f32>]) -> RgbImage {
    let h = heat.len() as u32;
    let w = heat.first().map_or(0, |r| r.len()) as u32;
    let (lo, hi) = heat
        .iter()
        .flatten()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let small = GrayImage::from_fn(w.max(1), h.max(1), |x, y| {
        let v = heat.get(y as usize).and_then(|r| r.get(x as usize)).copied().unwrap_or(lo);
        Luma([(((v - lo) / span) * 255.0).round() as u8])
    });
    let big = image::imageops::resize(&small, image.width(), image.height(), FilterType::Triangle);
    RgbImage::from_fn(image.width(), image.height(), |x, y| {
        let base = image.get_pixel(x, y);
        let heat = colormap(big.get_pixel(x, y)[0] as f32 / 255.0);
        let mix = |i: usize| ((1.0 - ALPHA) * base[i] as f32 + ALPHA * heat[i] as f32).round() as u8;
        Rgb([mix(0), mix(1), mix(2)])
    })
}

/// Renders one PNG per backbone stage into `out_dir` and returns the paths.
pub fn render_stage_heatmaps(
    model: &FusionModel,
    sample: &Sample,
    image: &RgbImage,
    out_dir: impl AsRef<Path>,
) -> Result<Vec<PathBuf>> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir)?;
    let (batch, _) = make_batch(&[sample], false)?;
    let out = model.forward_with(&batch, true)?;
    let patch_side = model.config().patch_side();
    let mut paths = Vec::with_capacity(out.features.stages.len());
    for (s, stage) in out.features.stages.iter().enumerate() {
        let valid = patch_side.div_ceil(1 << s).max(1);
        let heat = stage_heat(stage, valid)?;
        if heat.is_empty() {
            return Err(Error::Shape(format!("stage {s} produced an empty map")));
        }
        let path = out_dir.join(format!("{}_stage{}.png", sample.id, s + 1));
        overlay(image, &heat).save(&path)?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn colormap_endpoints() {
        assert_eq!(colormap(0.0), Rgb([0, 0, 128]));
        assert_eq!(colormap(1.0), Rgb([153, 0, 0]));
        assert_eq!(colormap(-1.0), colormap(0.0));
    }

    #[test]
    fn overlay_keeps_size_and_is_deterministic() {
        let img = RgbImage::from_pixel(20, 12, Rgb([100, 100, 100]));
        let heat = vec![vec![0.0, 1.0], vec![2.0, 3.0]];
        let a = overlay(&img, &heat);
        assert_eq!(a.dimensions(), (20, 12));
        assert_eq!(a, overlay(&img, &heat));
        assert_ne!(a.get_pixel(0, 0), a.get_pixel(19, 11));
    }
}
