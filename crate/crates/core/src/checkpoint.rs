//! Checkpoint directories: `params.safetensors`, an optional
//! `optimizer.safetensors`, and a JSON header describing the architecture,
//! training provenance and the parameter file's SHA-256.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::encoders::{DualEncoderConfig, PyramidEncoderConfig};
use crate::error::{Error, Result};
use crate::fewshot::{HeadConfig, PcaProjector};
use crate::pretrain::DecoderConfig;
use crate::seeding::sha256_hex;

pub const PARAMS_FILE: &str = "params.safetensors";
pub const OPTIMIZER_FILE: &str = "optimizer.safetensors";
pub const HEADER_FILE: &str = "header.json";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckpointKind {
    Pretrain,
    MetaTrain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: CheckpointKind,
    pub format_version: u32,
    pub pyramid: PyramidEncoderConfig,
    #[serde(default)]
    pub decoder: Option<DecoderConfig>,
    #[serde(default)]
    pub encoders: Option<DualEncoderConfig>,
    #[serde(default)]
    pub head: Option<HeadConfig>,
    #[serde(default)]
    pub projector: Option<PcaProjector>,
    /// Optimizer steps (pretraining) or episodes (meta-training) taken.
    pub step: usize,
    pub seed: u64,
    #[serde(default)]
    pub provenance: BTreeMap<String, String>,
    /// Filled in on save.
    #[serde(default)]
    pub params_sha256: String,
}

impl CheckpointHeader {
    pub fn new(kind: CheckpointKind, pyramid: PyramidEncoderConfig, step: usize, seed: u64) -> Self {
        Self {
            kind,
            format_version: FORMAT_VERSION,
            pyramid,
            decoder: None,
            encoders: None,
            head: None,
            projector: None,
            step,
            seed,
            provenance: BTreeMap::new(),
            params_sha256: String::new(),
        }
    }

    pub fn dim(&self) -> Option<usize> {
        self.encoders.as_ref().map(|e| e.dim)
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub dir: PathBuf,
    pub header: CheckpointHeader,
    pub params: HashMap<String, Tensor>,
    pub optimizer: Option<HashMap<String, Tensor>>,
}

/// Write a checkpoint directory, replacing any existing one at `dir`.
/// Files are staged in a sibling directory and moved into place so a crash
/// never leaves a half-written checkpoint behind.
pub fn save_checkpoint(
    dir: &Path,
    mut header: CheckpointHeader,
    params: &HashMap<String, Tensor>,
    optimizer: Option<&HashMap<String, Tensor>>,
) -> Result<PathBuf> {
    let staging = dir.with_extension("partial");
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    }
    fs::create_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    let params_path = staging.join(PARAMS_FILE);
    candle_core::safetensors::save(params, &params_path)?;
    let bytes = fs::read(&params_path).map_err(|e| Error::io(&params_path, e))?;
    header.params_sha256 = sha256_hex(&bytes);
    if let Some(opt) = optimizer {
        candle_core::safetensors::save(opt, staging.join(OPTIMIZER_FILE))?;
    }
    let header_path = staging.join(HEADER_FILE);
    fs::write(&header_path, serde_json::to_string_pretty(&header)?).map_err(|e| Error::io(&header_path, e))?;
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::rename(&staging, dir).map_err(|e| Error::io(dir, e))?;
    Ok(dir.to_path_buf())
}

pub fn read_header(dir: &Path) -> Result<CheckpointHeader> {
    let path = dir.join(HEADER_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let header: CheckpointHeader = serde_json::from_str(&text)?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: format version {} (expected {FORMAT_VERSION})",
            dir.display(),
            header.format_version
        )));
    }
    Ok(header)
}

/// SHA-256 of the parameter file as stored on disk.
pub fn params_checksum(dir: &Path) -> Result<String> {
    let path = dir.join(PARAMS_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Load and verify a checkpoint.
pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let header = read_header(dir)?;
    let actual = params_checksum(dir)?;
    if actual != header.params_sha256 {
        return Err(Error::Checkpoint(format!(
            "{}: parameter checksum {actual} does not match header {}",
            dir.display(),
            header.params_sha256
        )));
    }
    let params = candle_core::safetensors::load(dir.join(PARAMS_FILE), &Device::Cpu)?;
    let opt_path = dir.join(OPTIMIZER_FILE);
    let optimizer = if opt_path.exists() {
        Some(candle_core::safetensors::load(&opt_path, &Device::Cpu)?)
    } else {
        None
    };
    Ok(Checkpoint {
        dir: dir.to_path_buf(),
        header,
        params,
        optimizer,
    })
}
