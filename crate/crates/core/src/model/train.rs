//! Sample preparation, the AdamW training loop and batched inference.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use image::RgbImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{load_image, resize_for_model, DatasetRecord};
use crate::error::{Error, Result};
use crate::metrics::{detection_metrics, ScoredBox};
use crate::model::heads::{decode_boxes, PredictionBundle};
use crate::model::loss::{compute_losses, LocalizationTargets, Targets};
use crate::model::{Batch, FusionModel, ModelConfig, Preset};
use crate::text::{truncate_embeddings, TextBackend};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Detect,
    Localize,
}

impl Task {
    /// 0.001 for detection, 0.01 for localization.
    pub fn default_lr(self) -> f64 {
        match self {
            Task::Detect => 1e-3,
            Task::Localize => 1e-2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub task: Task,
    /// Falls back to the task default.
    #[serde(default)]
    pub lr: Option<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    /// Stop after this many optimizer steps regardless of `epochs`.
    #[serde(default)]
    pub max_steps: Option<usize>,
    pub weight_decay: f64,
    /// Seeds batch shuffling.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            task: Task::Detect,
            lr: None,
            epochs: 20,
            batch_size: 16,
            max_steps: None,
            weight_decay: 0.01,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn lr(&self) -> f64 {
        self.lr.unwrap_or_else(|| self.task.default_lr())
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr() > 0.0 && self.lr().is_finite()) {
            return Err(Error::Config(format!("invalid learning rate {}", self.lr())));
        }
        if self.epochs == 0 && self.max_steps.is_none() {
            return Err(Error::Config("either epochs or max_steps must be positive".into()));
        }
        Ok(())
    }
}

/// One record encoded for the model.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    /// `(L², d_lm)`, zero-padded.
    pub tokens: Tensor,
    /// Tokens that reached the model.
    pub n: usize,
    /// `(3, S, S)`.
    pub image: Tensor,
    pub orig_size: (u32, u32),
    pub label: bool,
    /// `L²` entries, 1 inside a gold span.
    pub token_targets: Vec<f64>,
    /// Gold boxes as corners in model-input pixels.
    pub boxes: Vec<[f64; 4]>,
}

impl Sample {
    pub fn has_localization(&self) -> bool {
        self.label && !self.boxes.is_empty()
    }
}

/// Encodes one record with an already decoded image.
pub fn prepare_sample(
    record: &DatasetRecord,
    image: &RgbImage,
    backend: &dyn TextBackend,
    cfg: &ModelConfig,
    device: &Device,
) -> Result<Sample> {
    let slots = cfg.max_tokens();
    let emb = truncate_embeddings(backend.encode(&record.text)?, slots)?;
    let n = emb.len();
    let tokens = emb.values.to_dtype(cfg.dtype())?.pad_with_zeros(0, 0, slots - n)?;
    let img = resize_for_model(image, cfg.image_size as u32, cfg.dtype(), device)?;

    let mut token_targets = vec![0.0; slots];
    let mut boxes = Vec::new();
    if let Some(gold) = &record.gold {
        for span in &gold.spans {
            for t in span.start()..span.end().min(n) {
                token_targets[t] = 1.0;
            }
        }
        for b in &gold.boxes {
            let m = img.to_model(b);
            boxes.push([m.x, m.y, m.x2(), m.y2()]);
        }
    }
    Ok(Sample {
        id: record.id.clone(),
        tokens,
        n,
        image: img.tensor,
        orig_size: (img.orig_width, img.orig_height),
        label: record.sarcastic,
        token_targets,
        boxes,
    })
}

/// Encodes records whose images live under `image_root`.
pub fn prepare_samples(
    records: &[DatasetRecord],
    image_root: &Path,
    backend: &dyn TextBackend,
    cfg: &ModelConfig,
    device: &Device,
) -> Result<Vec<Sample>> {
    records
        .iter()
        .map(|r| {
            let path = image_root.join(&r.image_path);
            if !path.exists() {
                return Err(Error::MissingImage {
                    id: r.id.clone(),
                    path,
                });
            }
            prepare_sample(r, &load_image(&path)?, backend, cfg, device)
        })
        .collect()
}

/// Stacks samples into model inputs and targets.
pub fn make_batch(samples: &[&Sample], with_localization: bool) -> Result<(Batch, Targets)> {
    let first = samples.first().ok_or_else(|| Error::invalid("empty batch"))?;
    let dtype = first.tokens.dtype();
    let dev = first.tokens.device();
    let slots = first.token_targets.len();

    let tokens = Tensor::stack(&samples.iter().map(|s| &s.tokens).collect::<Vec<_>>(), 0)?;
    let images = Tensor::stack(&samples.iter().map(|s| &s.image).collect::<Vec<_>>(), 0)?;
    let mask: Vec<f64> = samples
        .iter()
        .flat_map(|s| (0..slots).map(move |i| if i < s.n { 1.0 } else { 0.0 }))
        .collect();
    let token_mask = Tensor::from_vec(mask, (samples.len(), slots), dev)?.to_dtype(dtype)?;
    let labels: Vec<f64> = samples.iter().map(|s| if s.label { 1.0 } else { 0.0 }).collect();
    let labels = Tensor::from_vec(labels, samples.len(), dev)?.to_dtype(dtype)?;

    let localization = if with_localization {
        if let Some(s) = samples.iter().find(|s| !s.has_localization()) {
            return Err(Error::validation(&s.id, "localization requested but gold is missing"));
        }
        let targets: Vec<f64> = samples.iter().flat_map(|s| s.token_targets.iter().copied()).collect();
        Some(LocalizationTargets {
            tokens: Tensor::from_vec(targets, (samples.len(), slots), dev)?.to_dtype(dtype)?,
            token_mask: token_mask.clone(),
            boxes: samples.iter().map(|s| s.boxes.clone()).collect(),
        })
    } else {
        None
    };
    let batch = Batch {
        tokens,
        token_mask,
        token_counts: samples.iter().map(|s| s.n).collect(),
        images,
    };
    Ok((batch, Targets { labels, localization }))
}

/// Loss that the optimizer minimizes for `task`.
pub fn task_loss(model: &FusionModel, batch: &Batch, targets: &Targets, task: Task) -> Result<(Tensor, StepLosses)> {
    let out = model.forward(batch)?;
    let losses = compute_losses(&out, targets)?;
    let (detection, token, boxes) = losses.scalars()?;
    let logged = StepLosses { detection, token, boxes };
    let total = match task {
        Task::Detect => losses.detection,
        Task::Localize => {
            let (Some(t), Some(b)) = (losses.token, losses.boxes) else {
                return Err(Error::invalid("localization loss without gold targets"));
            };
            (t + b)?
        }
    };
    Ok((total, logged))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub detection: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub token: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub boxes: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    /// The optimized objective.
    pub loss: f64,
    pub parts: StepLosses,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub lr: f64,
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
}

impl TrainHistory {
    pub fn final_loss(&self) -> Option<f64> {
        self.steps.last().map(|s| s.loss)
    }
}

/// Samples the task trains on: everything for detection, sarcastic records
/// with gold for localization.
pub fn task_samples(samples: &[Sample], task: Task) -> Vec<&Sample> {
    match task {
        Task::Detect => samples.iter().collect(),
        Task::Localize => samples.iter().filter(|s| s.has_localization()).collect(),
    }
}

/// Trains in place. Batches are reshuffled every epoch from `cfg.seed`;
/// a non-finite loss aborts with [`Error::Diverged`].
pub fn train(
    model: &FusionModel,
    train_set: &[Sample],
    val_set: Option<&[Sample]>,
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    cfg.validate()?;
    let pool = task_samples(train_set, cfg.task);
    if pool.is_empty() {
        return Err(Error::invalid("no training samples for this task"));
    }
    let lr = cfg.lr();
    let params = ParamsAdamW {
        lr,
        weight_decay: cfg.weight_decay,
        ..Default::default()
    };
    let mut opt = AdamW::new(model.varmap().all_vars(), params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let with_loc = cfg.task == Task::Localize;

    let mut history = TrainHistory {
        lr,
        steps: Vec::new(),
        epochs: Vec::new(),
    };
    let mut step = 0usize;
    let epochs = if cfg.max_steps.is_some() { usize::MAX } else { cfg.epochs };
    'outer: for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..pool.len()).collect();
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut count = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break;
            }
            let members: Vec<&Sample> = chunk.iter().map(|&i| pool[i]).collect();
            let (batch, targets) = make_batch(&members, with_loc)?;
            let (loss, parts) = task_loss(model, &batch, &targets, cfg.task)?;
            let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !value.is_finite() {
                return Err(Error::Diverged {
                    step,
                    detail: format!("loss {value} (components {parts:?})"),
                });
            }
            opt.backward_step(&loss)?;
            history.steps.push(StepLog {
                step,
                epoch,
                loss: value,
                parts,
            });
            sum += value;
            count += 1;
            step += 1;
        }
        if count == 0 {
            break 'outer;
        }
        let val_accuracy = match val_set {
            Some(v) if !v.is_empty() => Some(accuracy(model, v, cfg.batch_size)?),
            _ => None,
        };
        log::info!("epoch {epoch}: loss {:.5}", sum / count as f64);
        history.epochs.push(EpochLog {
            epoch,
            mean_loss: sum / count as f64,
            val_accuracy,
        });
        if cfg.max_steps.is_some_and(|m| step >= m) {
            break;
        }
    }
    Ok(history)
}

/// Batched inference. Token probabilities cover the tokens that reached the
/// model; boxes are in original image pixels.
pub fn predict(
    model: &FusionModel,
    samples: &[Sample],
    batch_size: usize,
    conf_threshold: f64,
) -> Result<Vec<PredictionBundle>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let members: Vec<&Sample> = chunk.iter().collect();
        let (batch, _) = make_batch(&members, false)?;
        let o = model.forward(&batch)?;
        let probs: Vec<f64> = o.sarcasm_prob.to_dtype(DType::F64)?.to_vec1()?;
        let tokens: Vec<Vec<f64>> = o.token_probs.to_dtype(DType::F64)?.to_vec2()?;
        for (b, s) in chunk.iter().enumerate() {
            let boxes: Vec<ScoredBox> =
                decode_boxes(&o.box_levels, b, model.config().image_size, s.orig_size, conf_threshold)?;
            out.push(PredictionBundle {
                id: s.id.clone(),
                sarcasm_prob: probs[b],
                token_probs: tokens[b][..s.n].to_vec(),
                boxes,
            });
        }
    }
    Ok(out)
}

/// Detection accuracy at cutoff 0.5.
pub fn accuracy(model: &FusionModel, samples: &[Sample], batch_size: usize) -> Result<f64> {
    let preds = predict(model, samples, batch_size, 1.0)?;
    let probs: Vec<f64> = preds.iter().map(|p| p.sarcasm_prob).collect();
    let labels: Vec<bool> = samples.iter().map(|s| s.label).collect();
    Ok(detection_metrics(&probs, &labels, 0.5)?.acc)
}

/// SHA-256 over the sorted record ids of a split.
pub fn split_hash(records: &[DatasetRecord]) -> String {
    let mut ids: Vec<&str> = records.iter().map(|r| r.id.as_str()).collect();
    ids.sort_unstable();
    let mut h = Sha256::new();
    for id in ids {
        h.update(id.as_bytes());
        h.update(b"\n");
    }
    format!("{:x}", h.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitHashes {
    pub train: String,
    pub val: String,
    pub test: String,
}

/// Everything needed to reproduce a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub task: Task,
    pub seed: u64,
    pub lr: f64,
    pub preset: Preset,
    pub steps: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_loss: Option<f64>,
    pub split_hashes: SplitHashes,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunManifest {
    pub fn new(model: &ModelConfig, train: &TrainConfig, history: &TrainHistory, split_hashes: SplitHashes) -> Self {
        Self {
            version: env!("CARGO_PKG_VERSION").to_string(),
            task: train.task,
            seed: model.seed,
            lr: history.lr,
            preset: model.preset,
            steps: history.steps.len(),
            final_loss: history.final_loss(),
            split_hashes,
            model: model.clone(),
            train: train.clone(),
        }
    }
}
