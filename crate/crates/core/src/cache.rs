//! On-disk feature banks: a raw little-endian `f32` matrix (`.bin`) next to
//! a JSON sidecar (`.json`) recording where the features came from.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use candle_core::{DType, Device};
use candle_nn::VarMap;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, CheckpointKind};
use crate::data::{Dataset, Split};
use crate::encoders::{PyramidEncoder, PYRAMID_PREFIX};
use crate::error::{Error, Result};
use crate::fewshot::DcpnModel;
use crate::nn::{restore, ParamBuilder};
use crate::seeding::sha256_hex;

const BATCH: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Global,
    Local,
}

impl Channel {
    pub fn as_str(self) -> &'static str {
        match self {
            Channel::Global => "global",
            Channel::Local => "local",
        }
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Channel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(Channel::Global),
            "local" => Ok(Channel::Local),
            o => Err(Error::InvalidArgument(format!("unknown channel `{o}` (global, local)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheSidecar {
    pub dataset: String,
    pub split: Split,
    pub checkpoint_sha256: String,
    pub channel: Channel,
    /// `[rows, dim]`.
    pub shape: [usize; 2],
    pub dtype: String,
    /// SHA-256 of the `.bin` file.
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingCache {
    pub meta: CacheSidecar,
    /// Row-major `rows × dim`.
    pub data: Vec<f32>,
}

fn to_bytes(data: &[f32]) -> Vec<u8> {
    data.iter().flat_map(|v| v.to_le_bytes()).collect()
}

impl EmbeddingCache {
    pub fn rows(&self) -> usize {
        self.meta.shape[0]
    }

    pub fn dim(&self) -> usize {
        self.meta.shape[1]
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let d = self.dim();
        &self.data[i * d..(i + 1) * d]
    }

    pub fn to_f64_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows()).map(|i| self.row(i).iter().map(|&v| v as f64).collect()).collect()
    }

    /// `<stem>.bin` and `<stem>.json`.
    pub fn paths(stem: &Path) -> (PathBuf, PathBuf) {
        (stem.with_extension("bin"), stem.with_extension("json"))
    }

    pub fn save(&self, stem: &Path) -> Result<()> {
        let (bin, json) = Self::paths(stem);
        if let Some(dir) = bin.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(&bin, to_bytes(&self.data)).map_err(|e| Error::io(&bin, e))?;
        fs::write(&json, serde_json::to_string_pretty(&self.meta)?).map_err(|e| Error::io(&json, e))
    }

    /// Load and verify shape and checksum against the sidecar.
    pub fn load(stem: &Path) -> Result<Self> {
        let (bin, json) = Self::paths(stem);
        let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
        let meta: CacheSidecar = serde_json::from_str(&text)?;
        let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        let actual = sha256_hex(&bytes);
        if actual != meta.sha256 {
            return Err(Error::Checkpoint(format!(
                "{}: checksum {actual} does not match sidecar {}",
                bin.display(),
                meta.sha256
            )));
        }
        if meta.dtype != "f32" || bytes.len() != 4 * meta.shape[0] * meta.shape[1] {
            return Err(Error::Shape(format!(
                "{}: {} bytes do not hold a {}x{} {} matrix",
                bin.display(),
                bytes.len(),
                meta.shape[0],
                meta.shape[1],
                meta.dtype
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
            .collect();
        Ok(Self { meta, data })
    }
}

/// Embed every sample of `dataset` with one channel of a checkpoint, in
/// inference mode.
///
/// A meta-training checkpoint provides both channels after their projection
/// heads. A pretraining checkpoint only holds the pyramid, so it yields the
/// pooled final-stage map of the global channel and rejects `Local`.
pub fn extract_embeddings(ckpt_dir: &Path, dataset: &Dataset, channel: Channel) -> Result<EmbeddingCache> {
    let ckpt = load_checkpoint(ckpt_dir)?;
    let device = Device::Cpu;
    let all: Vec<usize> = (0..dataset.len()).collect();
    let rows: Vec<Vec<f32>> = match ckpt.header.kind {
        CheckpointKind::MetaTrain => {
            let model = DcpnModel::from_checkpoint(ckpt_dir, &device)?;
            model.encoder.config.validate_input(dataset.image_size, dataset.image_size)?;
            let mut out = Vec::with_capacity(dataset.len());
            for chunk in all.chunks(BATCH) {
                let images = dataset.batch(chunk, DType::F32, &device)?;
                let (g, l) = model.embed(&images, false)?;
                let z = if channel == Channel::Global { g } else { l };
                out.extend(z.to_vec2::<f32>()?);
            }
            out
        }
        CheckpointKind::Pretrain => {
            if channel == Channel::Local {
                return Err(Error::Checkpoint(format!(
                    "{} is a pretraining checkpoint and has no local channel",
                    ckpt_dir.display()
                )));
            }
            let varmap = VarMap::new();
            let pb = ParamBuilder::new(&varmap, ckpt.header.seed, DType::F32, &device);
            let encoder = PyramidEncoder::new(&pb.pp(PYRAMID_PREFIX), &ckpt.header.pyramid)?;
            restore(&varmap, &ckpt.params, Some(&format!("{PYRAMID_PREFIX}.")))?;
            let mut out = Vec::with_capacity(dataset.len());
            for chunk in all.chunks(BATCH) {
                let images = dataset.batch(chunk, DType::F32, &device)?;
                out.extend(encoder.forward_pooled(&images)?.to_vec2::<f32>()?);
            }
            out
        }
    };
    let dim = rows.first().map_or(0, Vec::len);
    let data: Vec<f32> = rows.into_iter().flatten().collect();
    Ok(EmbeddingCache {
        meta: CacheSidecar {
            dataset: dataset.name.clone(),
            split: dataset.split,
            checkpoint_sha256: ckpt.header.params_sha256.clone(),
            channel,
            shape: [dataset.len(), dim],
            dtype: "f32".into(),
            sha256: sha256_hex(&to_bytes(&data)),
        },
        data,
    })
}
