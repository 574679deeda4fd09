//! SCKPT v1: u64 little-endian header length, UTF-8 JSON header, then the
//! concatenated little-endian tensor blobs listed in the header directory.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::AdamW;
use super::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, SwinUnetr};
use crate::tensor::{DType, Element, ParamStore, Parameter, Tensor};

pub const SCKPT_MAGIC: &str = "SCKPT";
pub const SCKPT_VERSION: u32 = 1;
const MAX_HEADER: u64 = 64 << 20;

/// Loop position and bookkeeping needed to continue a run exactly.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Optimizer steps taken.
    pub step: usize,
    pub total_steps: usize,
    /// Sum of training losses within the current epoch.
    pub epoch_loss_sum: f64,
    pub best_val_dice: Option<f64>,
    pub best_epoch: Option<usize>,
    pub fold: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Entry {
    name: String,
    kind: String,
    shape: Vec<usize>,
    dtype: DType,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    magic: String,
    version: u32,
    model: ModelConfig,
    train: Option<TrainConfig>,
    state: TrainState,
    optimizer_step: Option<u64>,
    /// Per-case streams are derived from (seed, epoch, case id); no mutable
    /// generator state exists between steps.
    rng: String,
    tensors: Vec<Entry>,
}

/// Model parameters plus optional optimizer and loop state.
#[derive(Clone, Debug)]
pub struct Checkpoint<E: Element> {
    pub model: SwinUnetr<E>,
    pub train: Option<TrainConfig>,
    pub state: TrainState,
    pub optimizer: Option<AdamW>,
}

fn push<T: Element>(blob: &mut Vec<u8>, dir: &mut Vec<Entry>, name: &str, kind: &str, shape: &[usize], data: &[T]) {
    dir.push(Entry { name: name.into(), kind: kind.into(), shape: shape.to_vec(), dtype: T::DTYPE, offset: blob.len() });
    for &v in data {
        v.write_le(blob);
    }
}

fn read<T: Element>(path: &Path, blob: &[u8], e: &Entry) -> Result<Vec<T>> {
    let n: usize = e.shape.iter().product();
    let size = e.dtype.size_of();
    let bytes = blob
        .get(e.offset..e.offset + n * size)
        .ok_or_else(|| Error::format(path, format!("tensor {} ({}) runs past the end of the payload", e.name, e.kind)))?;
    Ok(match e.dtype {
        DType::F32 => bytes.chunks_exact(4).map(|b| T::from_f64(f32::read_le(b) as f64)).collect(),
        DType::F64 => bytes.chunks_exact(8).map(|b| T::from_f64(f64::read_le(b))).collect(),
    })
}

impl<E: Element> Checkpoint<E> {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut blob = Vec::new();
        let mut dir = Vec::new();
        for p in self.model.params().iter() {
            push(&mut blob, &mut dir, p.name(), "param", p.value().shape(), p.value().data());
        }
        if let Some(opt) = &self.optimizer {
            for (i, p) in self.model.params().iter().enumerate() {
                push(&mut blob, &mut dir, p.name(), "adam_m", p.value().shape(), &opt.m[i]);
                push(&mut blob, &mut dir, p.name(), "adam_v", p.value().shape(), &opt.v[i]);
            }
        }
        let header = Header {
            magic: SCKPT_MAGIC.into(),
            version: SCKPT_VERSION,
            model: self.model.config().clone(),
            train: self.train.clone(),
            state: self.state.clone(),
            optimizer_step: self.optimizer.as_ref().map(|o| o.step),
            rng: "chacha8 keyed by sha256(seed, epoch, case id)".into(),
            tensors: dir,
        };
        let json = serde_json::to_vec(&header)?;
        let mut buf = Vec::with_capacity(8 + json.len() + blob.len());
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        buf.extend_from_slice(&blob);
        if let Some(d) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        // Write then rename so a crash never leaves a truncated checkpoint.
        let tmp = path.with_extension("sckpt.tmp");
        fs::write(&tmp, buf).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() < 8 {
            return Err(Error::format(path, "file shorter than the length prefix"));
        }
        let len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
        if len > MAX_HEADER || 8 + len as usize > bytes.len() {
            return Err(Error::format(path, format!("corrupt header length {len}")));
        }
        let header: Header = serde_json::from_slice(&bytes[8..8 + len as usize]).map_err(|e| Error::format(path, format!("corrupt header: {e}")))?;
        if header.magic != SCKPT_MAGIC || header.version != SCKPT_VERSION {
            return Err(Error::format(path, format!("not SCKPT v1 (magic {:?}, version {})", header.magic, header.version)));
        }
        let blob = &bytes[8 + len as usize..];
        let mut params = ParamStore::new();
        let mut moments: Vec<(String, Vec<f64>, Vec<f64>)> = Vec::new();
        for e in &header.tensors {
            match e.kind.as_str() {
                "param" => {
                    params.insert(Parameter::new(e.name.clone(), Tensor::new(e.shape.clone(), read::<E>(path, blob, e)?)?))?;
                }
                "adam_m" => moments.push((e.name.clone(), read::<f64>(path, blob, e)?, Vec::new())),
                "adam_v" => {
                    let last = moments.last_mut().filter(|m| m.0 == e.name).ok_or_else(|| Error::format(path, format!("second moment of {} without first", e.name)))?;
                    last.2 = read::<f64>(path, blob, e)?;
                }
                other => return Err(Error::format(path, format!("unknown tensor kind {other}"))),
            }
        }
        let model = SwinUnetr::from_params(header.model, params).map_err(|e| Error::format(path, e.to_string()))?;
        let optimizer = match header.optimizer_step {
            None => None,
            Some(step) => {
                let names: Vec<&str> = model.params().iter().map(|p| p.name()).collect();
                if moments.len() != names.len() || moments.iter().zip(&names).any(|(m, n)| m.0 != *n) {
                    return Err(Error::format(path, "optimizer moments do not match the parameter list"));
                }
                let config = header.train.as_ref().map(|t| t.optimizer).unwrap_or_default();
                let (m, v) = moments.into_iter().map(|(_, m, v)| (m, v)).unzip();
                Some(AdamW { config, step, m, v })
            }
        };
        Ok(Checkpoint { model, train: header.train, state: header.state, optimizer })
    }
}

/// Model weights only, converted to `E`.
pub fn load_model<E: Element>(path: impl AsRef<Path>) -> Result<SwinUnetr<E>> {
    Ok(Checkpoint::<E>::load(path)?.model)
}
