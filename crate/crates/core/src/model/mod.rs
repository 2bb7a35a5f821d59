//! The fusion model: document matrix added to every image window, a
//! shifted-window backbone over the fused grid, and three task heads.

pub mod checkpoint;
pub mod eval;
pub mod heads;
pub mod loss;
pub mod params;
pub mod swin;
pub mod train;

use candle_core::{DType, Device, Tensor};
use candle_nn::VarMap;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::{DocumentMatrix, TextBackendConfig, TokenProjection};
use crate::vision::{window_partition, windows_to_grid, ConvStack, PatchProjection, WindowStack, PATCH};

pub use heads::{BoxLevel, PredictionBundle};
use heads::{BoxHead, DetectHead, TokenHead};
use swin::{BackboneSpec, SwinBackbone};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Tiny,
    Small,
    Base,
    /// A few thousand parameters, for tests and gradient checks.
    Test,
}

/// Which inputs reach the backbone. The single-modality settings zero the
/// other input, keeping the architecture and parameter count identical.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "kebab-case")]
pub enum Modality {
    #[default]
    Fused,
    TextOnly,
    ImageOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "kebab-case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub preset: Preset,
    /// Square model input side in pixels.
    pub image_size: usize,
    /// `L`, the document matrix side and attention window.
    pub side: usize,
    /// `d`, the fused channel width.
    pub width: usize,
    pub conv_depth: usize,
    pub stage_depths: [usize; 4],
    pub heads: [usize; 4],
    pub mlp_ratio: f64,
    /// Hidden width of the box head stem.
    pub head_hidden: usize,
    pub text_backend: TextBackendConfig,
    #[serde(default)]
    pub modality: Modality,
    #[serde(default)]
    pub precision: Precision,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::tiny()
    }
}

impl ModelConfig {
    fn desk(preset: Preset, width: usize, stage_depths: [usize; 4], heads: [usize; 4]) -> Self {
        Self {
            preset,
            image_size: 224,
            side: 8,
            width,
            conv_depth: 3,
            stage_depths,
            heads,
            mlp_ratio: 4.0,
            head_hidden: 128,
            text_backend: TextBackendConfig::default(),
            modality: Modality::Fused,
            precision: Precision::F32,
            seed: 0,
        }
    }

    pub fn tiny() -> Self {
        Self::desk(Preset::Tiny, 96, [2, 2, 6, 2], [3, 6, 12, 24])
    }

    pub fn small() -> Self {
        Self::desk(Preset::Small, 96, [2, 2, 18, 2], [3, 6, 12, 24])
    }

    pub fn base() -> Self {
        Self::desk(Preset::Base, 128, [2, 2, 18, 2], [4, 8, 16, 32])
    }

    pub fn test() -> Self {
        Self {
            preset: Preset::Test,
            image_size: 32,
            side: 4,
            width: 8,
            conv_depth: 1,
            stage_depths: [1, 1, 1, 1],
            heads: [1, 2, 4, 8],
            mlp_ratio: 2.0,
            head_hidden: 16,
            text_backend: TextBackendConfig::HashEmbedding { dim: 16, seed: 0 },
            modality: Modality::Fused,
            precision: Precision::F32,
            seed: 0,
        }
    }

    pub fn from_preset(preset: Preset) -> Self {
        match preset {
            Preset::Tiny => Self::tiny(),
            Preset::Small => Self::small(),
            Preset::Base => Self::base(),
            Preset::Test => Self::test(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.precision.dtype()
    }

    /// Patch grid side for the configured input size.
    pub fn patch_side(&self) -> usize {
        self.image_size / PATCH
    }

    /// Side of the fused grid after padding to whole windows.
    pub fn fused_side(&self) -> usize {
        self.patch_side().div_ceil(self.side) * self.side
    }

    pub fn max_tokens(&self) -> usize {
        self.side * self.side
    }

    pub fn block_count(&self) -> usize {
        self.stage_depths.iter().sum()
    }

    pub fn backbone_spec(&self) -> BackboneSpec {
        BackboneSpec {
            width: self.width,
            depths: self.stage_depths,
            heads: self.heads,
            window: self.side,
            mlp_ratio: self.mlp_ratio,
            input_side: self.fused_side(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.image_size < PATCH || self.image_size % PATCH != 0 {
            return fail(format!("image_size {} must be a positive multiple of {PATCH}", self.image_size));
        }
        if self.side == 0 || self.width == 0 {
            return fail("side and width must be positive".into());
        }
        for s in 0..4 {
            let c = self.width << s;
            if self.heads[s] == 0 || c % self.heads[s] != 0 {
                return fail(format!("stage {s}: {c} channels not divisible by {} heads", self.heads[s]));
            }
        }
        if !(self.mlp_ratio > 0.0) {
            return fail("mlp_ratio must be positive".into());
        }
        if self.head_hidden == 0 {
            return fail("head_hidden must be positive".into());
        }
        if let TextBackendConfig::HashEmbedding { dim: 0, .. } = self.text_backend {
            return fail("hash embedding dim must be positive".into());
        }
        Ok(())
    }
}

/// Fused windows `ŵ_k = ϖ + ω_k`.
#[derive(Debug, Clone)]
pub struct FusedStack {
    /// `(B, m, L, L, d)`.
    pub windows: Tensor,
    pub grid: (usize, usize),
    pub doc_mask: Vec<bool>,
}

impl FusedStack {
    pub fn reassemble(&self) -> Result<Tensor> {
        windows_to_grid(&self.windows, self.grid)
    }
}

/// Adds the document matrix to every window of the stack.
pub fn fuse(doc: &DocumentMatrix, imgs: &WindowStack) -> Result<FusedStack> {
    let d = imgs.width()?;
    if doc.side != imgs.side || doc.width != d {
        return Err(Error::Shape(format!(
            "document matrix {0}x{0}x{1} does not match windows {2}x{2}x{3}",
            doc.side, doc.width, imgs.side, d
        )));
    }
    Ok(FusedStack {
        windows: imgs.windows.broadcast_add(&doc.values)?,
        grid: imgs.grid,
        doc_mask: doc.mask.clone(),
    })
}

/// Backbone stage outputs and the per-token read-out.
#[derive(Debug, Clone)]
pub struct BackboneFeatures {
    /// `(B, H_s, W_s, C_s)` for the four stages.
    pub stages: Vec<Tensor>,
    /// `(B, L, L, d)`: stage-0 output averaged over the windows.
    pub token_features: Tensor,
    /// Last-block attention per stage, when requested.
    pub attention: Vec<Option<Tensor>>,
}

/// Encoder-side inputs of a batch.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `(B, L², d_lm)`, zero beyond each document's token count.
    pub tokens: Tensor,
    /// `(B, L²)`, 1 on real tokens.
    pub token_mask: Tensor,
    pub token_counts: Vec<usize>,
    /// `(B, 3, S, S)` in `[0, 1]`.
    pub images: Tensor,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.token_counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_counts.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct ModelOutputs {
    /// `(B)`.
    pub sarcasm_prob: Tensor,
    /// `(B, L²)` in raster order; padded cells are meaningless.
    pub token_probs: Tensor,
    pub box_levels: Vec<BoxLevel>,
    pub features: BackboneFeatures,
}

/// All trainable parts of the model. Parameters live in one [`VarMap`].
pub struct FusionModel {
    config: ModelConfig,
    text_width: usize,
    varmap: VarMap,
    device: Device,
    token_proj: TokenProjection,
    conv: ConvStack,
    patch: PatchProjection,
    backbone: SwinBackbone,
    detect: DetectHead,
    token_head: TokenHead,
    box_head: BoxHead,
}

impl FusionModel {
    /// Builds a freshly initialized model for token embeddings of width
    /// `text_width`. Initialization is a pure function of `config.seed`.
    pub fn new(config: &ModelConfig, text_width: usize, device: &Device) -> Result<Self> {
        config.validate()?;
        let varmap = VarMap::new();
        let vb = params::seeded_var_builder(&varmap, config.seed, config.dtype(), device);
        let d = config.width;
        let token_proj = TokenProjection::new(text_width, d, vb.pp("text_proj"))?;
        let conv = ConvStack::new(config.conv_depth, d, vb.pp("conv"))?;
        let patch = PatchProjection::new(conv.out_channels(), d, vb.pp("patch"))?;
        let spec = config.backbone_spec();
        let backbone = SwinBackbone::new(spec.clone(), vb.pp("backbone"))?;
        let detect = DetectHead::new(spec.channels(3), vb.pp("detect"))?;
        let token_head = TokenHead::new(d, vb.pp("token"))?;
        let box_scales: Vec<(usize, usize, f64)> = [1usize, 2]
            .iter()
            .map(|&s| (s, spec.channels(s), (PATCH << s) as f64))
            .collect();
        let box_head = BoxHead::new(&box_scales, config.head_hidden, vb.pp("box"))?;
        Ok(Self {
            config: config.clone(),
            text_width,
            varmap,
            device: device.clone(),
            token_proj,
            conv,
            patch,
            backbone,
            detect,
            token_head,
            box_head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn text_width(&self) -> usize {
        self.text_width
    }

    pub fn varmap(&self) -> &VarMap {
        &self.varmap
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn parameter_count(&self) -> usize {
        self.varmap.all_vars().iter().map(|v| v.elem_count()).sum()
    }

    /// Projected document matrices `(B, L, L, d)` with padded cells zeroed.
    pub fn document_matrices(&self, batch: &Batch) -> Result<Tensor> {
        let l = self.config.side;
        let (b, slots, _) = batch.tokens.dims3()?;
        if slots != l * l {
            return Err(Error::Shape(format!("{slots} token slots for L = {l}")));
        }
        let projected = self.token_proj.forward(&batch.tokens)?;
        let masked = projected.broadcast_mul(&batch.token_mask.unsqueeze(2)?)?;
        Ok(masked.reshape((b, l, l, self.config.width))?)
    }

    /// Patch-grid windows `(B, m, L, L, d)` of the images.
    pub fn image_windows(&self, images: &Tensor) -> Result<WindowStack> {
        let (_, _, h, w) = images.dims4()?;
        let s = self.config.image_size;
        if h != s || w != s {
            return Err(Error::Shape(format!("image {h}x{w}, model expects {s}x{s}")));
        }
        let features = self.conv.forward(images)?;
        let grid = self.patch.forward(&features)?;
        window_partition(&grid, self.config.side)
    }

    /// Runs the backbone on fused windows and reads out token features.
    pub fn backbone(&self, fused: &FusedStack, keep_attention: bool) -> Result<BackboneFeatures> {
        let grid = fused.reassemble()?;
        let out = self.backbone.forward(&grid, keep_attention)?;
        let stage0 = window_partition(&out.stages[0], self.config.side)?;
        let token_features = stage0.windows.mean(1)?;
        Ok(BackboneFeatures {
            stages: out.stages,
            token_features,
            attention: out.attention,
        })
    }

    pub fn forward(&self, batch: &Batch) -> Result<ModelOutputs> {
        self.forward_with(batch, false)
    }

    pub fn forward_with(&self, batch: &Batch, keep_attention: bool) -> Result<ModelOutputs> {
        let mut doc = self.document_matrices(batch)?;
        let mut imgs = self.image_windows(&batch.images)?;
        match self.config.modality {
            Modality::Fused => {}
            Modality::TextOnly => imgs.windows = imgs.windows.zeros_like()?,
            Modality::ImageOnly => doc = doc.zeros_like()?,
        }
        let fused = FusedStack {
            windows: imgs.windows.broadcast_add(&doc.unsqueeze(1)?)?,
            grid: imgs.grid,
            doc_mask: Vec::new(),
        };
        let features = self.backbone(&fused, keep_attention)?;
        let sarcasm_prob = self.detect.forward(&features.stages[3])?;
        let token_probs = self.token_head.forward(&features.token_features)?;
        let box_levels = self.box_head.forward(&features.stages)?;
        Ok(ModelOutputs {
            sarcasm_prob,
            token_probs,
            box_levels,
            features,
        })
    }
}
