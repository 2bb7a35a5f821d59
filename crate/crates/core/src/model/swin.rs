//! Four-stage shifted-window attention backbone.
//!
//! Stage 0 runs at the fused grid resolution with `d` channels; every later
//! stage starts with a 2×2 patch merge (half the side, twice the channels).
//! Within a stage, blocks alternate between regular and shifted windows.

use candle_core::{DType, Device, Module, Tensor, D};
use candle_nn::{Init, Linear, VarBuilder};

use crate::error::Result;
use crate::nn::LayerNorm;

/// Attention logit added between cells that come from different regions
/// after the cyclic shift. Large enough that `exp` underflows to exactly
/// zero: the usual -100 leaves subnormal weights, which are very slow on CPU.
const MASK_VALUE: f64 = -1e4;

struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    fn new(dim: usize, hidden: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            fc1: candle_nn::linear(dim, hidden, vb.pp("fc1"))?,
            fc2: candle_nn::linear(hidden, dim, vb.pp("fc2"))?,
        })
    }

    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        self.fc2.forward(&crate::nn::gelu(&self.fc1.forward(x)?)?)
    }
}

struct WindowAttention {
    qkv: Linear,
    proj: Linear,
    bias_table: Tensor,
    bias_index: Tensor,
    heads: usize,
    window: usize,
    scale: f64,
}

impl WindowAttention {
    fn new(dim: usize, window: usize, heads: usize, vb: VarBuilder) -> Result<Self> {
        let qkv = candle_nn::linear(dim, 3 * dim, vb.pp("qkv"))?;
        let proj = candle_nn::linear(dim, dim, vb.pp("proj"))?;
        let span = 2 * window - 1;
        let bias_table = vb.get_with_hints(
            (span * span, heads),
            "relative_position_bias_table",
            Init::Randn { mean: 0.0, stdev: 0.02 },
        )?;

        // index[(i, j)] = offset of (row_i - row_j, col_i - col_j) in the table
        let n = window * window;
        let mut index = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                let dr = (i / window) as i64 - (j / window) as i64 + window as i64 - 1;
                let dc = (i % window) as i64 - (j % window) as i64 + window as i64 - 1;
                index.push((dr * span as i64 + dc) as u32);
            }
        }
        let bias_index = Tensor::from_vec(index, n * n, vb.device())?;
        Ok(Self {
            qkv,
            proj,
            bias_table,
            bias_index,
            heads,
            window,
            scale: ((dim / heads) as f64).powf(-0.5),
        })
    }

    /// Relative position bias `(heads, N, N)`.
    fn position_bias(&self) -> candle_core::Result<Tensor> {
        let n = self.window * self.window;
        self.bias_table
            .index_select(&self.bias_index, 0)?
            .reshape((n, n, self.heads))?
            .permute((2, 0, 1))
    }

    /// `x`: `(B·nW, N, C)`; `mask`: `(nW, N, N)`. Also returns the attention
    /// weights `(B·nW, heads, N, N)`.
    fn forward(&self, x: &Tensor, mask: Option<&Tensor>) -> candle_core::Result<(Tensor, Tensor)> {
        let (bw, n, c) = x.dims3()?;
        let hd = c / self.heads;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape((bw, n, 3, self.heads, hd))?
            .permute((2, 0, 3, 1, 4))?;
        let q = (qkv.get(0)?.contiguous()? * self.scale)?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;

        let mut attn = q
            .matmul(&k.transpose(D::Minus2, D::Minus1)?.contiguous()?)?
            .broadcast_add(&self.position_bias()?.unsqueeze(0)?)?;
        if let Some(mask) = mask {
            let nw = mask.dim(0)?;
            attn = attn
                .reshape((bw / nw, nw, self.heads, n, n))?
                .broadcast_add(&mask.unsqueeze(1)?.unsqueeze(0)?)?
                .reshape((bw, self.heads, n, n))?;
        }
        let attn = crate::nn::softmax_last_dim(&attn)?;
        let out = attn
            .matmul(&v)?
            .transpose(1, 2)?
            .reshape((bw, n, c))?;
        Ok((self.proj.forward(&out)?, attn))
    }
}

/// `(B, H, W, C)` with `H`, `W` multiples of `ws` to `(B·nW, ws², C)`.
fn partition(x: &Tensor, ws: usize) -> candle_core::Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    x.reshape((b, h / ws, ws, w / ws, ws, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .reshape((b * (h / ws) * (w / ws), ws * ws, c))
}

fn unpartition(x: &Tensor, ws: usize, b: usize, h: usize, w: usize) -> candle_core::Result<Tensor> {
    let c = x.dim(2)?;
    x.reshape((b, h / ws, w / ws, ws, ws, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .reshape((b, h, w, c))
}

/// Cyclic shift along both spatial axes of `(B, H, W, C)`.
fn roll2(x: &Tensor, shift: i32) -> candle_core::Result<Tensor> {
    x.roll(shift, 1)?.roll(shift, 2)
}

/// Region mask for a shifted partition of an `h × w` grid, `(nW, N, N)`.
fn shift_mask(h: usize, w: usize, ws: usize, shift: usize, dtype: DType, dev: &Device) -> candle_core::Result<Tensor> {
    let region = |pos: usize, len: usize| -> usize {
        if pos < len - ws {
            0
        } else if pos < len - shift {
            1
        } else {
            2
        }
    };
    let mut labels = vec![0usize; h * w];
    for r in 0..h {
        for c in 0..w {
            labels[r * w + c] = region(r, h) * 3 + region(c, w);
        }
    }
    let n = ws * ws;
    let (nh, nw) = (h / ws, w / ws);
    let mut mask = Vec::with_capacity(nh * nw * n * n);
    for wr in 0..nh {
        for wc in 0..nw {
            let cell = |k: usize| labels[(wr * ws + k / ws) * w + wc * ws + k % ws];
            for i in 0..n {
                for j in 0..n {
                    mask.push(if cell(i) == cell(j) { 0.0f32 } else { MASK_VALUE as f32 });
                }
            }
        }
    }
    Tensor::from_vec(mask, (nh * nw, n, n), dev)?.to_dtype(dtype)
}

struct SwinBlock {
    norm1: LayerNorm,
    attn: WindowAttention,
    norm2: LayerNorm,
    mlp: Mlp,
    window: usize,
    shift: usize,
}

impl SwinBlock {
    fn new(dim: usize, heads: usize, window: usize, shift: usize, mlp_ratio: f64, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(dim, 1e-5, vb.pp("norm1"))?,
            attn: WindowAttention::new(dim, window, heads, vb.pp("attn"))?,
            norm2: LayerNorm::new(dim, 1e-5, vb.pp("norm2"))?,
            mlp: Mlp::new(dim, (dim as f64 * mlp_ratio) as usize, vb.pp("mlp"))?,
            window,
            shift,
        })
    }

    fn forward(&self, x: &Tensor) -> candle_core::Result<(Tensor, Tensor)> {
        let (b, h, w, _) = x.dims4()?;
        let ws = self.window;
        let pad_h = (ws - h % ws) % ws;
        let pad_w = (ws - w % ws) % ws;

        let y = self.norm1.forward(x)?;
        let y = y.pad_with_zeros(1, 0, pad_h)?.pad_with_zeros(2, 0, pad_w)?;
        let (hp, wp) = (h + pad_h, w + pad_w);
        let y = if self.shift > 0 { roll2(&y, -(self.shift as i32))? } else { y };
        let mask = if self.shift > 0 {
            Some(shift_mask(hp, wp, ws, self.shift, x.dtype(), x.device())?)
        } else {
            None
        };
        let (y, attn) = self.attn.forward(&partition(&y, ws)?, mask.as_ref())?;
        let y = unpartition(&y, ws, b, hp, wp)?;
        let y = if self.shift > 0 { roll2(&y, self.shift as i32)? } else { y };
        let y = y.narrow(1, 0, h)?.narrow(2, 0, w)?;

        let x = (x + y)?;
        let out = (&x + self.mlp.forward(&self.norm2.forward(&x)?)?)?;
        Ok((out, attn))
    }
}

/// 2×2 neighborhood concat, normalized and projected from 4C to 2C.
struct PatchMerging {
    norm: LayerNorm,
    reduction: Linear,
}

impl PatchMerging {
    fn new(dim: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(4 * dim, 1e-5, vb.pp("norm"))?,
            reduction: candle_nn::linear_no_bias(4 * dim, 2 * dim, vb.pp("reduction"))?,
        })
    }

    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        let x = x.pad_with_zeros(1, 0, h % 2)?.pad_with_zeros(2, 0, w % 2)?;
        let (h2, w2) = (h.div_ceil(2), w.div_ceil(2));
        let x = x
            .reshape((b, h2, 2, w2, 2, c))?
            .permute((0, 1, 3, 4, 2, 5))?
            .reshape((b, h2, w2, 4 * c))?;
        self.reduction.forward(&self.norm.forward(&x)?)
    }
}

struct Stage {
    merge: Option<PatchMerging>,
    blocks: Vec<SwinBlock>,
}

/// Hyper-parameters the backbone is built from.
#[derive(Debug, Clone)]
pub struct BackboneSpec {
    pub width: usize,
    pub depths: [usize; 4],
    pub heads: [usize; 4],
    pub window: usize,
    pub mlp_ratio: f64,
    /// Side of the stage-0 grid the backbone will see.
    pub input_side: usize,
}

impl BackboneSpec {
    pub fn channels(&self, stage: usize) -> usize {
        self.width << stage
    }

    /// Grid side at each stage.
    pub fn sides(&self) -> [usize; 4] {
        let mut s = [self.input_side; 4];
        for i in 1..4 {
            s[i] = s[i - 1].div_ceil(2);
        }
        s
    }
}

/// Per-stage outputs, channels last.
#[derive(Debug, Clone)]
pub struct StageOutputs {
    /// `(B, H_s, W_s, C_s)` for s = 0..4.
    pub stages: Vec<Tensor>,
    /// Attention weights of the last block of each stage, when requested.
    pub attention: Vec<Option<Tensor>>,
}

pub struct SwinBackbone {
    stages: Vec<Stage>,
    spec: BackboneSpec,
}

impl SwinBackbone {
    pub fn new(spec: BackboneSpec, vb: VarBuilder) -> Result<Self> {
        let sides = spec.sides();
        let mut stages = Vec::with_capacity(4);
        for s in 0..4 {
            let dim = spec.channels(s);
            let svb = vb.pp(format!("stage{s}"));
            let merge = if s > 0 {
                Some(PatchMerging::new(spec.channels(s - 1), svb.pp("merge"))?)
            } else {
                None
            };
            // windows never exceed the grid; a grid that fits in one window is not shifted
            let window = spec.window.min(sides[s]).max(1);
            let shift = if sides[s] > window { window / 2 } else { 0 };
            let blocks = (0..spec.depths[s])
                .map(|i| {
                    let shift = if i % 2 == 1 { shift } else { 0 };
                    SwinBlock::new(dim, spec.heads[s], window, shift, spec.mlp_ratio, svb.pp(format!("block{i}")))
                })
                .collect::<Result<Vec<_>>>()?;
            stages.push(Stage { merge, blocks });
        }
        Ok(Self { stages, spec })
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn block_count(&self) -> usize {
        self.stages.iter().map(|s| s.blocks.len()).sum()
    }

    /// `x`: `(B, H, W, d)`.
    pub fn forward(&self, x: &Tensor, keep_attention: bool) -> Result<StageOutputs> {
        let mut stages = Vec::with_capacity(4);
        let mut attention = Vec::with_capacity(4);
        let mut x = x.clone();
        for stage in &self.stages {
            if let Some(m) = &stage.merge {
                x = m.forward(&x)?;
            }
            let mut last = None;
            for block in &stage.blocks {
                let (y, a) = block.forward(&x)?;
                x = y;
                last = Some(a);
            }
            stages.push(x.clone());
            attention.push(if keep_attention { last } else { None });
        }
        Ok(StageOutputs { stages, attention })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::seeded_var_builder;
    use candle_nn::VarMap;

    #[test]
    fn shift_mask_blocks_wrapped_regions() {
        let m = shift_mask(4, 4, 2, 1, DType::F32, &Device::Cpu).unwrap();
        assert_eq!(m.dims(), &[4, 4, 4]);
        let m = m.to_vec3::<f32>().unwrap();
        // first window lies in one region
        assert!(m[0].iter().flatten().all(|&v| v == 0.0));
        // last window mixes all four corner regions
        assert_eq!(m[3][0][3], MASK_VALUE as f32);
        assert_eq!(m[3][0][0], 0.0);
    }

    #[test]
    fn partition_roundtrip() {
        let x = Tensor::randn(0f32, 1.0, (2, 8, 4, 3), &Device::Cpu).unwrap();
        let p = partition(&x, 2).unwrap();
        assert_eq!(p.dims(), &[16, 4, 3]);
        let back = unpartition(&p, 2, 2, 8, 4).unwrap();
        let d = (back - &x).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn stage_shapes_halve_and_double() {
        let spec = BackboneSpec {
            width: 8,
            depths: [1, 2, 1, 1],
            heads: [1, 2, 4, 8],
            window: 4,
            mlp_ratio: 2.0,
            input_side: 12,
        };
        let vm = VarMap::new();
        let bb = SwinBackbone::new(spec, seeded_var_builder(&vm, 0, DType::F32, &Device::Cpu)).unwrap();
        assert_eq!(bb.block_count(), 5);
        let x = Tensor::randn(0f32, 1.0, (2, 12, 12, 8), &Device::Cpu).unwrap();
        let out = bb.forward(&x, true).unwrap();
        let dims: Vec<_> = out.stages.iter().map(|t| t.dims().to_vec()).collect();
        assert_eq!(dims, vec![vec![2, 12, 12, 8], vec![2, 6, 6, 16], vec![2, 3, 3, 32], vec![2, 2, 2, 64]]);
        assert!(out.attention.iter().all(Option::is_some));
    }
}
