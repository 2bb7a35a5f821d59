//! Document encoder: per-token embeddings, the `f_c` projection, and the
//! square `L × L × d` document matrix.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use candle_nn::{Linear, Module, VarBuilder};
use candle_transformers::models::bert::{BertModel, Config as BertConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use tokenizers::Tokenizer;

use crate::error::{Error, Result};

/// Contextual or hashed embeddings, one row per whitespace token.
#[derive(Debug, Clone)]
pub struct TokenEmbeddings {
    /// `(n, d_lm)`.
    pub values: Tensor,
    /// Whitespace-token index of every encoder piece that was produced,
    /// special tokens excluded.
    pub token_map: Vec<usize>,
}

impl TokenEmbeddings {
    pub fn len(&self) -> usize {
        self.values.dim(0).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.values.dim(1).unwrap_or(0)
    }
}

/// Anything that turns a document into per-word vectors.
pub trait TextBackend: Send + Sync {
    /// `d_lm`.
    fn width(&self) -> usize;

    fn encode(&self, text: &str) -> Result<TokenEmbeddings>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TextBackendConfig {
    /// Fixed pseudo-random vector per lowercased token. Needs no weights.
    HashEmbedding { dim: usize, seed: u64 },
    /// A BERT checkpoint directory holding `config.json`, `tokenizer.json`
    /// and `model.safetensors`.
    PretrainedContextual { model_dir: PathBuf },
}

impl Default for TextBackendConfig {
    fn default() -> Self {
        TextBackendConfig::HashEmbedding { dim: 64, seed: 0 }
    }
}

impl TextBackendConfig {
    pub fn build(&self, dtype: DType, device: &Device) -> Result<Box<dyn TextBackend>> {
        Ok(match self {
            TextBackendConfig::HashEmbedding { dim, seed } => {
                Box::new(HashEmbedding::new(*dim, *seed, dtype, device.clone())?)
            }
            TextBackendConfig::PretrainedContextual { model_dir } => {
                Box::new(BertBackend::from_dir(model_dir, dtype, device)?)
            }
        })
    }
}

/// Deterministic per-token vectors seeded by an FNV-1a hash of the token.
#[derive(Debug, Clone)]
pub struct HashEmbedding {
    dim: usize,
    seed: u64,
    dtype: DType,
    device: Device,
}

impl HashEmbedding {
    pub fn new(dim: usize, seed: u64, dtype: DType, device: Device) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("hash embedding width must be positive"));
        }
        Ok(Self { dim, seed, dtype, device })
    }

    fn vector(&self, token: &str) -> impl Iterator<Item = f32> {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in token.to_lowercase().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(h ^ self.seed);
        (0..self.dim).map(move |_| StandardNormal.sample(&mut rng))
    }
}

impl TextBackend for HashEmbedding {
    fn width(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str) -> Result<TokenEmbeddings> {
        let tokens: Vec<&str> = text.split_whitespace().collect();
        if tokens.is_empty() {
            return Err(Error::invalid("cannot encode empty text"));
        }
        let data: Vec<f32> = tokens.iter().flat_map(|t| self.vector(t)).collect();
        let values = Tensor::from_vec(data, (tokens.len(), self.dim), &self.device)?.to_dtype(self.dtype)?;
        Ok(TokenEmbeddings {
            values,
            token_map: (0..tokens.len()).collect(),
        })
    }
}

/// Frozen BERT encoder with first-subpiece pooling back to whitespace tokens.
pub struct BertBackend {
    model: BertModel,
    tokenizer: Tokenizer,
    hidden: usize,
    max_positions: usize,
    device: Device,
}

impl BertBackend {
    pub fn from_dir(dir: impl AsRef<Path>, dtype: DType, device: &Device) -> Result<Self> {
        let dir = dir.as_ref();
        let missing = |f: &str| Error::MissingArtifact(dir.join(f).display().to_string());
        let config_path = dir.join("config.json");
        let weights = dir.join("model.safetensors");
        let tok_path = dir.join("tokenizer.json");
        if !config_path.exists() {
            return Err(missing("config.json"));
        }
        if !weights.exists() {
            return Err(missing("model.safetensors"));
        }
        let config: BertConfig = serde_json::from_slice(&std::fs::read(&config_path)?)?;
        let tokenizer = Tokenizer::from_file(&tok_path).map_err(|e| Error::Tokenizer(e.to_string()))?;
        // SAFETY: the weights file is only read, and is not expected to change while mapped.
        let vb = unsafe { VarBuilder::from_mmaped_safetensors(&[weights], dtype, device)? };
        let model = BertModel::load(vb, &config)?;
        Ok(Self::from_parts(model, tokenizer, &config, device.clone()))
    }

    pub fn from_parts(model: BertModel, tokenizer: Tokenizer, config: &BertConfig, device: Device) -> Self {
        Self {
            model,
            tokenizer,
            hidden: config.hidden_size,
            max_positions: config.max_position_embeddings,
            device,
        }
    }
}

impl TextBackend for BertBackend {
    fn width(&self) -> usize {
        self.hidden
    }

    fn encode(&self, text: &str) -> Result<TokenEmbeddings> {
        let words: Vec<&str> = text.split_whitespace().collect();
        if words.is_empty() {
            return Err(Error::invalid("cannot encode empty text"));
        }
        let enc = self
            .tokenizer
            .encode(words.as_slice(), true)
            .map_err(|e| Error::Tokenizer(e.to_string()))?;
        let mut ids: Vec<u32> = enc.get_ids().to_vec();
        let mut word_ids: Vec<Option<u32>> = enc.get_word_ids().to_vec();
        if ids.len() > self.max_positions {
            log::warn!("document truncated to {} encoder pieces", self.max_positions);
            ids.truncate(self.max_positions);
            word_ids.truncate(self.max_positions);
        }

        let input = Tensor::new(ids.as_slice(), &self.device)?.unsqueeze(0)?;
        let types = input.zeros_like()?;
        let hidden = self.model.forward(&input, &types, None)?.squeeze(0)?;

        // first piece of every word; words whose pieces were cut off get zeros
        let mut first = vec![None; words.len()];
        let mut token_map = Vec::new();
        for (pos, w) in word_ids.iter().enumerate() {
            if let Some(w) = w {
                let w = *w as usize;
                token_map.push(w);
                if w < first.len() && first[w].is_none() {
                    first[w] = Some(pos);
                }
            }
        }
        let zeros = Tensor::zeros(self.hidden, hidden.dtype(), &self.device)?;
        let rows = first
            .iter()
            .map(|p| match p {
                Some(p) => hidden.get(*p),
                None => Ok(zeros.clone()),
            })
            .collect::<candle_core::Result<Vec<_>>>()?;
        Ok(TokenEmbeddings {
            values: Tensor::stack(&rows, 0)?,
            token_map,
        })
    }
}

/// The `f_c` layer: an affine map from encoder width to model width.
#[derive(Debug, Clone)]
pub struct TokenProjection {
    linear: Linear,
    in_width: usize,
    out_width: usize,
}

impl TokenProjection {
    pub fn new(in_width: usize, out_width: usize, vb: VarBuilder) -> Result<Self> {
        let linear = candle_nn::linear(in_width, out_width, vb)?;
        Ok(Self { linear, in_width, out_width })
    }

    pub fn from_linear(linear: Linear) -> Result<Self> {
        let (out_width, in_width) = linear.weight().dims2()?;
        Ok(Self { linear, in_width, out_width })
    }

    pub fn out_width(&self) -> usize {
        self.out_width
    }

    /// Projects `(..., d_lm)` to `(..., d)`.
    pub fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        let w = xs.dim(candle_core::D::Minus1)?;
        if w != self.in_width {
            return Err(Error::Shape(format!(
                "token width {w} does not match configured encoder width {}",
                self.in_width
            )));
        }
        Ok(self.linear.forward(xs)?)
    }

    pub fn project(&self, emb: &TokenEmbeddings) -> Result<Tensor> {
        self.forward(&emb.values)
    }
}

/// Tokens laid out row-major on an `L × L` grid, zero-padded.
#[derive(Debug, Clone)]
pub struct DocumentMatrix {
    /// `(L, L, d)`.
    pub values: Tensor,
    /// Row-major, `true` on the first `n` cells.
    pub mask: Vec<bool>,
    pub side: usize,
    pub width: usize,
}

impl DocumentMatrix {
    pub fn token_count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    /// Inverse of [`square_reshape`]: the `(n, d)` token rows.
    pub fn unreshape(&self) -> Result<Tensor> {
        let n = self.token_count();
        Ok(self
            .values
            .reshape((self.side * self.side, self.width))?
            .narrow(0, 0, n)?)
    }
}

/// Places token `t` (0-based) at cell `(t / L, t % L)`.
pub fn square_reshape(projected: &Tensor, side: usize) -> Result<DocumentMatrix> {
    let (n, d) = projected.dims2()?;
    let slots = side * side;
    if n > slots {
        return Err(Error::DocumentTooLong { tokens: n, slots });
    }
    let values = projected.pad_with_zeros(0, 0, slots - n)?.reshape((side, side, d))?;
    Ok(DocumentMatrix {
        values,
        mask: (0..slots).map(|i| i < n).collect(),
        side,
        width: d,
    })
}

/// First `max` rows of an embedding, warning when rows are dropped.
pub fn truncate_embeddings(emb: TokenEmbeddings, max: usize) -> Result<TokenEmbeddings> {
    let n = emb.len();
    if n <= max {
        return Ok(emb);
    }
    log::warn!("document of {n} tokens truncated to {max}");
    Ok(TokenEmbeddings {
        values: emb.values.narrow(0, 0, max)?,
        token_map: emb.token_map.into_iter().filter(|&t| t < max).collect(),
    })
}

/// Resolves a relative `model_dir` against a base directory.
pub fn resolve_model_dir(cfg: &TextBackendConfig, base: &Path) -> TextBackendConfig {
    match cfg {
        TextBackendConfig::PretrainedContextual { model_dir } if model_dir.is_relative() => {
            TextBackendConfig::PretrainedContextual {
                model_dir: base.join(model_dir),
            }
        }
        other => other.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_nn::VarMap;
    use tokenizers::models::wordpiece::WordPiece;
    use tokenizers::normalizers::bert::BertNormalizer;
    use tokenizers::pre_tokenizers::bert::BertPreTokenizer;
    use tokenizers::processors::bert::BertProcessing;

    fn doc(n: usize) -> String {
        (0..n).map(|i| format!("w{}", i % 17)).collect::<Vec<_>>().join(" ")
    }

    #[test]
    fn hash_backend_shapes_and_determinism() {
        let be = HashEmbedding::new(16, 3, DType::F32, Device::Cpu).unwrap();
        let e = be.encode("single").unwrap();
        assert_eq!(e.values.dims(), &[1, 16]);
        let a = be.encode(&doc(63)).unwrap();
        let b = be.encode(&doc(63)).unwrap();
        assert_eq!(a.values.dims(), &[63, 16]);
        assert_eq!(a.values.to_vec2::<f32>().unwrap(), b.values.to_vec2::<f32>().unwrap());
        assert!(be.encode("   ").is_err());
    }

    #[test]
    fn hash_backend_same_word_same_vector() {
        let be = HashEmbedding::new(8, 0, DType::F32, Device::Cpu).unwrap();
        let e = be.encode("red car Red").unwrap().values.to_vec2::<f32>().unwrap();
        assert_eq!(e[0], e[2]);
        assert_ne!(e[0], e[1]);
    }

    fn tiny_tokenizer() -> Tokenizer {
        let vocab = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "w", "##1", "##2", "##3", "##4", "##5", "##6", "##7", "##8", "##9", "##0"];
        let mut file = tempfile::NamedTempFile::new().unwrap();
        std::io::Write::write_all(&mut file, vocab.join("\n").as_bytes()).unwrap();
        let wp = WordPiece::from_file(file.path().to_str().unwrap())
            .unk_token("[UNK]".into())
            .build()
            .unwrap();
        let mut tok = Tokenizer::new(wp);
        let _ = tok.with_normalizer(Some(BertNormalizer::default()));
        tok.with_pre_tokenizer(Some(BertPreTokenizer));
        tok.with_post_processor(Some(BertProcessing::new(("[SEP]".into(), 3), ("[CLS]".into(), 2))));
        tok
    }

    #[test]
    fn pretrained_backend_pools_first_subpiece() {
        let config = BertConfig {
            vocab_size: 15,
            num_hidden_layers: 1,
            ..BertConfig::default()
        };
        let vm = VarMap::new();
        let vb = VarBuilder::from_varmap(&vm, DType::F32, &Device::Cpu);
        let model = BertModel::load(vb, &config).unwrap();
        let be = BertBackend::from_parts(model, tiny_tokenizer(), &config, Device::Cpu);
        assert_eq!(be.width(), 768);

        // "w12" splits into w ##1 ##2: several pieces per word
        let e = be.encode(&doc(63)).unwrap();
        assert_eq!(e.values.dims(), &[63, 768]);
        assert!(e.token_map.len() > 63);
        assert_eq!(e.token_map.first(), Some(&0));
        assert_eq!(e.token_map.last(), Some(&62));

        let one = be.encode("w1").unwrap();
        assert_eq!(one.values.dims(), &[1, 768]);
        let again = be.encode(&doc(63)).unwrap();
        assert_eq!(e.values.to_vec2::<f32>().unwrap(), again.values.to_vec2::<f32>().unwrap());
    }

    fn projection(d_lm: usize, d: usize) -> TokenProjection {
        let vm = VarMap::new();
        let vb = VarBuilder::from_varmap(&vm, DType::F32, &Device::Cpu);
        TokenProjection::new(d_lm, d, vb).unwrap()
    }

    #[test]
    fn projection_shapes() {
        let x = Tensor::randn(0f32, 1.0, (63, 768), &Device::Cpu).unwrap();
        assert_eq!(projection(768, 96).forward(&x).unwrap().dims(), &[63, 96]);
        assert_eq!(projection(768, 8).forward(&x).unwrap().dims(), &[63, 8]);
        assert!(matches!(projection(512, 8).forward(&x), Err(Error::Shape(_))));
    }

    #[test]
    fn projection_of_zero_with_zero_bias_is_zero() {
        let w = Tensor::randn(0f32, 1.0, (8, 16), &Device::Cpu).unwrap();
        let b = Tensor::zeros(8, DType::F32, &Device::Cpu).unwrap();
        let p = TokenProjection::from_linear(Linear::new(w, Some(b))).unwrap();
        let out = p.forward(&Tensor::zeros((5, 16), DType::F32, &Device::Cpu).unwrap()).unwrap();
        assert_eq!(out.abs().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap(), 0.0);
    }

    fn numbered(n: usize, d: usize) -> Tensor {
        let data: Vec<f32> = (0..n * d).map(|i| (i / d + 1) as f32).collect();
        Tensor::from_vec(data, (n, d), &Device::Cpu).unwrap()
    }

    #[test]
    fn raster_order_placement() {
        let m = square_reshape(&numbered(5, 2), 3).unwrap();
        let v = m.values.to_vec3::<f32>().unwrap();
        // token t (1-based) at row (t-1)/L, col (t-1)%L
        assert_eq!(v[0][0][0], 1.0);
        assert_eq!(v[0][2][0], 3.0);
        assert_eq!(v[1][0][0], 4.0);
        assert_eq!(v[1][1][0], 5.0);
        assert_eq!(v[1][2], vec![0.0, 0.0]);
        assert_eq!(v[2][2], vec![0.0, 0.0]);
        assert_eq!(m.mask, vec![true, true, true, true, true, false, false, false, false]);
        assert_eq!(m.token_count(), 5);
    }

    #[test]
    fn full_and_overfull_documents() {
        let m = square_reshape(&numbered(9, 1), 3).unwrap();
        assert!(m.mask.iter().all(|b| *b));
        assert!(matches!(
            square_reshape(&numbered(10, 1), 3),
            Err(Error::DocumentTooLong { tokens: 10, slots: 9 })
        ));
    }

    #[test]
    fn unreshape_inverts_reshape() {
        let x = Tensor::randn(0f32, 1.0, (11, 4), &Device::Cpu).unwrap();
        let m = square_reshape(&x, 4).unwrap();
        assert_eq!(m.unreshape().unwrap().to_vec2::<f32>().unwrap(), x.to_vec2::<f32>().unwrap());
    }
}
