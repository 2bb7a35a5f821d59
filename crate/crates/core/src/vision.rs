//! Image encoder: a resolution-preserving conv stack, 4×4 patch projection
//! and the partition of the patch grid into `L × L` windows.

use candle_core::{Module, Tensor};
use candle_nn::{Conv2d, Conv2dConfig, VarBuilder};

use crate::error::{Error, Result};
use crate::nn::LayerNorm;

/// Side of one patch in input pixels.
pub const PATCH: usize = 4;

/// Stack of 3×3, stride-1, pad-1 convolutions with ReLU.
#[derive(Debug, Clone)]
pub struct ConvStack {
    convs: Vec<Conv2d>,
    out_channels: usize,
}

impl ConvStack {
    pub fn new(depth: usize, channels: usize, vb: VarBuilder) -> Result<Self> {
        let cfg = Conv2dConfig {
            padding: 1,
            stride: 1,
            ..Default::default()
        };
        let convs = (0..depth)
            .map(|i| {
                let c_in = if i == 0 { 3 } else { channels };
                candle_nn::conv2d(c_in, channels, 3, cfg, vb.pp(format!("conv{i}")))
            })
            .collect::<candle_core::Result<Vec<_>>>()?;
        let out_channels = if depth == 0 { 3 } else { channels };
        Ok(Self { convs, out_channels })
    }

    pub fn depth(&self) -> usize {
        self.convs.len()
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    /// `(B, 3, H, W)` to `(B, c, H, W)`; depth 0 passes the image through.
    pub fn forward(&self, image: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = image.dims4()?;
        if c != 3 {
            return Err(Error::Shape(format!("expected an RGB image, got {c} channels")));
        }
        if h < PATCH || w < PATCH {
            return Err(Error::Shape(format!("image {h}x{w} smaller than one patch")));
        }
        let mut x = image.clone();
        for conv in &self.convs {
            x = conv.forward(&x)?.relu()?;
        }
        Ok(x)
    }
}

/// Non-overlapping 4×4 patches mapped to `d` channels and normalized.
#[derive(Debug, Clone)]
pub struct PatchProjection {
    conv: Conv2d,
    norm: LayerNorm,
}

impl PatchProjection {
    pub fn new(in_channels: usize, width: usize, vb: VarBuilder) -> Result<Self> {
        let cfg = Conv2dConfig {
            stride: PATCH,
            ..Default::default()
        };
        let conv = candle_nn::conv2d(in_channels, width, PATCH, cfg, vb.pp("proj"))?;
        let norm = LayerNorm::new(width, 1e-5, vb.pp("norm"))?;
        Ok(Self { conv, norm })
    }

    /// Projection before normalization, `(B, d, H/4, W/4)`.
    pub fn project_raw(&self, features: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = features.dims4()?;
        if h % PATCH != 0 || w % PATCH != 0 {
            return Err(Error::Shape(format!(
                "feature map {h}x{w} is not divisible into {PATCH}x{PATCH} patches"
            )));
        }
        Ok(self.conv.forward(features)?)
    }

    /// `(B, c, H, W)` to the channels-last patch grid `(B, H/4, W/4, d)`.
    pub fn forward(&self, features: &Tensor) -> Result<Tensor> {
        let x = self.project_raw(features)?.permute((0, 2, 3, 1))?;
        Ok(self.norm.forward(&x)?)
    }
}

/// `m = rows × cols` windows of `L × L × d`, in raster order.
#[derive(Debug, Clone)]
pub struct WindowStack {
    /// `(B, m, L, L, d)`.
    pub windows: Tensor,
    pub side: usize,
    /// `(rows, cols)` of the window layout.
    pub grid: (usize, usize),
    /// Zero rows/cols appended to the patch grid, `(bottom, right)`.
    pub pad: (usize, usize),
}

impl WindowStack {
    pub fn count(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn width(&self) -> Result<usize> {
        Ok(self.windows.dim(4)?)
    }

    /// Window `k` of batch item `b`, `(L, L, d)`.
    pub fn window(&self, b: usize, k: usize) -> Result<Tensor> {
        Ok(self.windows.get(b)?.get(k)?)
    }

    /// Tiles the windows back into the padded grid `(B, rows·L, cols·L, d)`.
    pub fn reassemble(&self) -> Result<Tensor> {
        windows_to_grid(&self.windows, self.grid)
    }

    /// Reassembles and removes the padding.
    pub fn to_patch_grid(&self) -> Result<Tensor> {
        let g = self.reassemble()?;
        let (_, hp, wp, _) = g.dims4()?;
        Ok(g.narrow(1, 0, hp - self.pad.0)?.narrow(2, 0, wp - self.pad.1)?)
    }
}

/// `(B, m, L, L, d)` with `m = rows·cols` to `(B, rows·L, cols·L, d)`.
pub fn windows_to_grid(windows: &Tensor, grid: (usize, usize)) -> Result<Tensor> {
    let (b, m, l, l2, d) = windows.dims5()?;
    if l != l2 || m != grid.0 * grid.1 {
        return Err(Error::Shape(format!(
            "{m} windows of {l}x{l2} do not tile a {}x{} layout",
            grid.0, grid.1
        )));
    }
    Ok(windows
        .reshape((b, grid.0, grid.1, l, l, d))?
        .permute((0, 1, 3, 2, 4, 5))?
        .reshape((b, grid.0 * l, grid.1 * l, d))?)
}

/// Zero-pads the patch grid `(B, P_h, P_w, d)` to multiples of `side` and
/// cuts it into non-overlapping windows.
pub fn window_partition(grid: &Tensor, side: usize) -> Result<WindowStack> {
    if side == 0 {
        return Err(Error::invalid("window side must be at least 1"));
    }
    let (b, ph, pw, d) = grid.dims4()?;
    let rows = ph.div_ceil(side);
    let cols = pw.div_ceil(side);
    let pad = (rows * side - ph, cols * side - pw);
    let padded = grid.pad_with_zeros(1, 0, pad.0)?.pad_with_zeros(2, 0, pad.1)?;
    let windows = padded
        .reshape((b, rows, side, cols, side, d))?
        .permute((0, 1, 3, 2, 4, 5))?
        .reshape((b, rows * cols, side, side, d))?;
    Ok(WindowStack {
        windows,
        side,
        grid: (rows, cols),
        pad,
    })
}
