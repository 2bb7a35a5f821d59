use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::imageops::FilterType;
use image::RgbImage;

use super::BoundingBox;
use crate::error::Result;

/// An image resized to the model's input resolution, remembering the
/// original size so predictions can be mapped back.
#[derive(Debug, Clone)]
pub struct ModelImage {
    /// `(3, size, size)` with values in `[0, 1]`.
    pub tensor: Tensor,
    pub orig_width: u32,
    pub orig_height: u32,
    pub size: u32,
}

impl ModelImage {
    /// Maps a box from original pixels into model-input pixels.
    pub fn to_model(&self, b: &BoundingBox) -> BoundingBox {
        scale_box(b, (self.orig_width, self.orig_height), (self.size, self.size))
    }

    /// Maps a box from model-input pixels back to original pixels.
    pub fn to_original(&self, b: &BoundingBox) -> BoundingBox {
        scale_box(b, (self.size, self.size), (self.orig_width, self.orig_height))
    }
}

pub fn load_image(path: impl AsRef<Path>) -> Result<RgbImage> {
    Ok(image::open(path)?.to_rgb8())
}

/// Bilinear resize to `size × size` followed by conversion to a CHW tensor.
pub fn resize_for_model(img: &RgbImage, size: u32, dtype: DType, device: &Device) -> Result<ModelImage> {
    let resized = if img.width() == size && img.height() == size {
        img.clone()
    } else {
        image::imageops::resize(img, size, size, FilterType::Triangle)
    };
    Ok(ModelImage {
        tensor: image_to_tensor(&resized, dtype, device)?,
        orig_width: img.width(),
        orig_height: img.height(),
        size,
    })
}

/// `(3, H, W)` tensor scaled to `[0, 1]`.
pub fn image_to_tensor(img: &RgbImage, dtype: DType, device: &Device) -> Result<Tensor> {
    let (w, h) = img.dimensions();
    let data: Vec<f32> = img.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
    let t = Tensor::from_vec(data, (h as usize, w as usize, 3), device)?
        .permute((2, 0, 1))?
        .contiguous()?
        .to_dtype(dtype)?;
    Ok(t)
}

pub fn scale_box(b: &BoundingBox, from: (u32, u32), to: (u32, u32)) -> BoundingBox {
    let sx = to.0 as f64 / from.0 as f64;
    let sy = to.1 as f64 / from.1 as f64;
    BoundingBox {
        x: b.x * sx,
        y: b.y * sy,
        w: b.w * sx,
        h: b.h * sy,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resize_keeps_original_dims_and_maps_boxes() {
        let img = RgbImage::from_pixel(448, 112, image::Rgb([255, 0, 0]));
        let m = resize_for_model(&img, 224, DType::F32, &Device::Cpu).unwrap();
        assert_eq!(m.tensor.dims(), &[3, 224, 224]);
        let b = BoundingBox::new(40.0, 20.0, 100.0, 50.0).unwrap();
        let in_model = m.to_model(&b);
        assert!((in_model.x - 20.0).abs() < 1e-9 && (in_model.h - 100.0).abs() < 1e-9);
        let back = m.to_original(&in_model);
        assert!((back.w - b.w).abs() < 1e-9 && (back.y - b.y).abs() < 1e-9);
        let red: f32 = m.tensor.get(0).unwrap().mean_all().unwrap().to_scalar().unwrap();
        assert!((red - 1.0).abs() < 1e-6);
    }
}
