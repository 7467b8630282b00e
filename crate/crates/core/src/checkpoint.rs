//! Versioned checkpoint container (safetensors).
//!
//! Tensors are stored as little-endian `f32` under `param.<name>`,
//! `adam_m.<name>` and `adam_v.<name>`, where `<name>` follows the
//! parameter hierarchy (`stage<n>.<module>.<layer>...`). The header metadata
//! carries `format_version`, the JSON model config, the optional JSON
//! training config, and the `step`, `epoch` and `adam_step` counters.

use std::collections::HashMap;
use std::path::Path;

use ndarray::Array4;
use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, SpdNet};
use crate::params::ParamStore;
use crate::trainer::{AdamState, TrainConfig};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub params: ParamStore<f32>,
    pub optimizer: Option<AdamState>,
    pub train: Option<TrainConfig>,
    pub step: u64,
    pub epoch: u64,
}

fn incompatible<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::CheckpointIncompatible(msg.into()))
}

fn to_bytes(a: &Array4<f32>) -> Vec<u8> {
    a.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn from_view(view: &TensorView<'_>, expected: (usize, usize, usize, usize), name: &str) -> Result<Array4<f32>> {
    let shape = [expected.0, expected.1, expected.2, expected.3];
    if view.dtype() != Dtype::F32 || view.shape() != shape {
        return incompatible(format!("{name}: stored {:?} {:?}, model expects F32 {shape:?}", view.dtype(), view.shape()));
    }
    let values: Vec<f32> = view
        .data()
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok(Array4::from_shape_vec(expected, values).expect("length checked by shape"))
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buffers: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
        let mut add = |prefix: &str, name: &str, a: &Array4<f32>| {
            buffers.push((format!("{prefix}.{name}"), a.shape().to_vec(), to_bytes(a)));
        };
        for (name, value) in self.params.iter() {
            add("param", name, value);
        }
        if let Some(opt) = &self.optimizer {
            for ((name, m), v) in self.params.names().iter().zip(&opt.m).zip(&opt.v) {
                add("adam_m", name, m);
                add("adam_v", name, v);
            }
        }
        let views = buffers
            .iter()
            .map(|(n, s, b)| Ok((n.clone(), TensorView::new(Dtype::F32, s.clone(), b).map_err(|e| Error::InvalidInput(e.to_string()))?)))
            .collect::<Result<Vec<_>>>()?;
        let mut meta = HashMap::new();
        meta.insert("format_version".to_string(), FORMAT_VERSION.to_string());
        meta.insert("model_config".to_string(), serde_json::to_string(&self.model).expect("serializable"));
        if let Some(t) = &self.train {
            meta.insert("train_config".to_string(), serde_json::to_string(t).expect("serializable"));
        }
        meta.insert("step".to_string(), self.step.to_string());
        meta.insert("epoch".to_string(), self.epoch.to_string());
        if let Some(opt) = &self.optimizer {
            meta.insert("adam_step".to_string(), opt.t.to_string());
        }
        safetensors::serialize(views, Some(meta)).map_err(|e| Error::InvalidInput(e.to_string()))
    }

    /// Writes to a temporary sibling file, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        std::fs::write(&tmp, bytes)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |e: safetensors::SafeTensorError| Error::CheckpointIncompatible(e.to_string());
        let (_, header) = SafeTensors::read_metadata(bytes).map_err(bad)?;
        let meta = header.metadata().clone().unwrap_or_default();
        let field = |k: &str| meta.get(k).ok_or_else(|| Error::CheckpointIncompatible(format!("missing metadata {k}")));
        let version: u32 = field("format_version")?.parse().map_err(|_| Error::CheckpointIncompatible("bad format_version".into()))?;
        if version != FORMAT_VERSION {
            return incompatible(format!("format version {version}, expected {FORMAT_VERSION}"));
        }
        let model: ModelConfig = serde_json::from_str(field("model_config")?)
            .map_err(|e| Error::CheckpointIncompatible(format!("model config: {e}")))?;
        let train = match meta.get("train_config") {
            Some(t) => Some(serde_json::from_str(t).map_err(|e| Error::CheckpointIncompatible(format!("train config: {e}")))?),
            None => None,
        };
        let counter = |k: &str| -> Result<u64> {
            field(k)?.parse().map_err(|_| Error::CheckpointIncompatible(format!("bad {k}")))
        };
        let (step, epoch) = (counter("step")?, counter("epoch")?);
        let tensors = SafeTensors::deserialize(bytes).map_err(bad)?;
        let params = Self::read_params(&tensors, &model)?;
        let optimizer = if meta.contains_key("adam_step") {
            let mut m = Vec::new();
            let mut v = Vec::new();
            for (name, value) in params.iter() {
                for (prefix, out) in [("adam_m", &mut m), ("adam_v", &mut v)] {
                    let key = format!("{prefix}.{name}");
                    let view = tensors.tensor(&key).map_err(|_| Error::CheckpointIncompatible(format!("missing {key}")))?;
                    out.push(from_view(&view, value.dim(), &key)?);
                }
            }
            Some(AdamState { t: counter("adam_step")?, m, v })
        } else {
            None
        };
        Ok(Self { model, params, optimizer, train, step, epoch })
    }

    fn read_params(tensors: &SafeTensors<'_>, model: &ModelConfig) -> Result<ParamStore<f32>> {
        let (_, mut store) = SpdNet::new::<f32>(model.clone(), 0).map_err(|e| Error::CheckpointIncompatible(e.to_string()))?;
        let stored = tensors.names().iter().filter(|n| n.starts_with("param.")).count();
        if stored != store.len() {
            return incompatible(format!("checkpoint holds {stored} parameter tensors, architecture has {}", store.len()));
        }
        let names = store.names().to_vec();
        for (name, slot) in names.iter().zip(store.values_mut()) {
            let key = format!("param.{name}");
            let view = tensors.tensor(&key).map_err(|_| Error::CheckpointIncompatible(format!("missing {key}")))?;
            *slot = from_view(&view, slot.dim(), &key)?;
        }
        Ok(store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }

    /// The network described by the embedded config.
    pub fn network(&self) -> Result<SpdNet> {
        Ok(SpdNet::new::<f32>(self.model.clone(), 0)?.0)
    }

    /// Checks the stored architecture against `expected` before use.
    pub fn ensure_matches(&self, expected: &ModelConfig) -> Result<()> {
        if &self.model != expected {
            return incompatible(format!(
                "checkpoint architecture {:?} differs from requested {:?}",
                self.model, expected
            ));
        }
        Ok(())
    }
}
