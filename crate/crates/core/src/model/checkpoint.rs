//! Checkpoints: one safetensors file whose metadata carries the model
//! config, so a checkpoint is enough to rebuild the model.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use candle_core::{Device, Tensor};
use safetensors::SafeTensors;

use crate::error::{Error, Result};
use crate::model::{FusionModel, ModelConfig};

const FORMAT: &str = "docmsu-checkpoint/1";

/// Metadata stored next to the weights.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub text_width: usize,
}

pub fn save(model: &FusionModel, path: impl AsRef<Path>) -> Result<()> {
    let data = model.varmap().data().lock().expect("varmap poisoned");
    let mut named: Vec<(String, Tensor)> = data.iter().map(|(k, v)| (k.clone(), v.as_tensor().clone())).collect();
    named.sort_by(|a, b| a.0.cmp(&b.0));
    drop(data);

    let metadata = HashMap::from([
        ("format".to_string(), FORMAT.to_string()),
        ("config".to_string(), serde_json::to_string(model.config())?),
        ("text_width".to_string(), model.text_width().to_string()),
    ]);
    safetensors::serialize_to_file(named.iter().map(|(k, t)| (k.as_str(), t)), Some(metadata), path.as_ref())
        .map_err(|e| Error::Checkpoint(e.to_string()))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(format!("checkpoint {}", path.display())));
    }
    Ok(fs::read(path)?)
}

fn parse_header(bytes: &[u8]) -> Result<CheckpointHeader> {
    let (_, meta) = SafeTensors::read_metadata(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let meta = meta
        .metadata()
        .as_ref()
        .ok_or_else(|| Error::Checkpoint("no metadata".into()))?;
    let field = |k: &str| {
        meta.get(k)
            .ok_or_else(|| Error::Checkpoint(format!("metadata lacks `{k}`")))
    };
    if field("format")? != FORMAT {
        return Err(Error::Checkpoint(format!("unsupported format {}", field("format")?)));
    }
    let config: ModelConfig = serde_json::from_str(field("config")?)?;
    let text_width = field("text_width")?
        .parse()
        .map_err(|_| Error::Checkpoint("text_width is not an integer".into()))?;
    Ok(CheckpointHeader { config, text_width })
}

pub fn read_header(path: impl AsRef<Path>) -> Result<CheckpointHeader> {
    parse_header(&read_bytes(path.as_ref())?)
}

/// Rebuilds the model described by the checkpoint and loads its weights.
pub fn load(path: impl AsRef<Path>, device: &Device) -> Result<FusionModel> {
    let bytes = read_bytes(path.as_ref())?;
    let header = parse_header(&bytes)?;
    let model = FusionModel::new(&header.config, header.text_width, device)?;
    let tensors = candle_core::safetensors::load_buffer(&bytes, device)?;
    {
        let data = model.varmap().data().lock().expect("varmap poisoned");
        if tensors.len() != data.len() {
            return Err(Error::Checkpoint(format!(
                "{} tensors stored, model has {}",
                tensors.len(),
                data.len()
            )));
        }
        for (name, var) in data.iter() {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("tensor {name} missing")))?;
            if t.shape() != var.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: stored {:?}, model {:?}",
                    t.shape(),
                    var.shape()
                )));
            }
            var.set(&t.to_dtype(var.dtype())?)?;
        }
    }
    Ok(model)
}

/// Loads a checkpoint and checks it against an expected config.
pub fn load_matching(path: impl AsRef<Path>, expected: &ModelConfig, device: &Device) -> Result<FusionModel> {
    let model = load(path, device)?;
    let got = model.config();
    let same_shape = got.preset == expected.preset
        && got.image_size == expected.image_size
        && got.side == expected.side
        && got.width == expected.width
        && got.conv_depth == expected.conv_depth
        && got.stage_depths == expected.stage_depths
        && got.heads == expected.heads
        && got.text_backend == expected.text_backend;
    if !same_shape {
        return Err(Error::Config("checkpoint config does not match the run config".into()));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_weights_and_config() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.safetensors");
        let mut cfg = ModelConfig::test();
        cfg.seed = 11;
        let a = FusionModel::new(&cfg, 16, &Device::Cpu).unwrap();
        save(&a, &path).unwrap();
        assert_eq!(read_header(&path).unwrap().config, cfg);
        let b = load(&path, &Device::Cpu).unwrap();
        let da = a.varmap().data().lock().unwrap();
        let db = b.varmap().data().lock().unwrap();
        for (k, v) in da.iter() {
            let x: Vec<f32> = v.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
            let y: Vec<f32> = db[k].as_tensor().flatten_all().unwrap().to_vec1().unwrap();
            assert_eq!(x, y, "{k}");
        }
    }

    #[test]
    fn missing_file_is_missing_artifact() {
        assert!(matches!(load("/nonexistent/ck.safetensors", &Device::Cpu), Err(Error::MissingArtifact(_))));
    }

    #[test]
    fn mismatched_config_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.safetensors");
        save(&FusionModel::new(&ModelConfig::test(), 16, &Device::Cpu).unwrap(), &path).unwrap();
        let mut other = ModelConfig::test();
        other.width = 16;
        assert!(matches!(load_matching(&path, &other, &Device::Cpu), Err(Error::Config(_))));
    }
}
