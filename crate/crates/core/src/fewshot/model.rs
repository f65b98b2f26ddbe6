use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use candle_nn::VarMap;
use rand::seq::index::sample as sample_indices;

use super::head::{HeadConfig, Scale};
use super::pca::{fit_pca, PcaProjector};
use super::prototypes::{averaging_matrix, mix_tensors, MultiScaleFeature};
use super::scoring::{score_tensors, ScoreTensors};
use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointHeader, CheckpointKind};
use crate::data::Dataset;
use crate::encoders::{DualEncoder, DualEncoderConfig, PYRAMID_PREFIX};
use crate::error::{Error, Result};
use crate::nn::{restore, snapshot, AdamW, ParamBuilder};
use crate::seeding::{stream, StreamDomain};

/// Images per forward pass when embedding whole datasets.
const EMBED_BATCH: usize = 64;

/// Dual encoder plus prototype head and its (epoch-frozen) PCA projector.
pub struct DcpnModel {
    varmap: VarMap,
    pub encoder: DualEncoder,
    pub head: HeadConfig,
    pub projector: Option<PcaProjector>,
    dtype: DType,
    device: Device,
    seed: u64,
}

impl DcpnModel {
    pub fn new(config: &DualEncoderConfig, head: HeadConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        head.validate()?;
        let varmap = VarMap::new();
        let pb = ParamBuilder::new(&varmap, seed, dtype, device);
        let encoder = DualEncoder::new(&pb, config)?;
        Ok(Self {
            varmap,
            encoder,
            head,
            projector: None,
            dtype,
            device: device.clone(),
            seed,
        })
    }

    pub fn varmap(&self) -> &VarMap {
        &self.varmap
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dim(&self) -> usize {
        self.encoder.dim()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Copy pyramid weights from a pretraining (or meta-training) checkpoint.
    pub fn load_pretrained_pyramid(&mut self, ckpt: &Checkpoint) -> Result<usize> {
        if ckpt.header.pyramid != self.encoder.config.pyramid {
            return Err(Error::Checkpoint(format!(
                "{}: pyramid architecture differs from the configured one",
                ckpt.dir.display()
            )));
        }
        let n = restore(&self.varmap, &ckpt.params, Some(&format!("{PYRAMID_PREFIX}.")))?;
        self.head.pretrained = true;
        Ok(n)
    }

    /// Rebuild a meta-trained model from its checkpoint directory.
    pub fn from_checkpoint(dir: &Path, device: &Device) -> Result<Self> {
        let ckpt = load_checkpoint(dir)?;
        if ckpt.header.kind != CheckpointKind::MetaTrain {
            return Err(Error::Checkpoint(format!("{} is not a meta-training checkpoint", dir.display())));
        }
        let config = ckpt
            .header
            .encoders
            .clone()
            .ok_or_else(|| Error::Checkpoint("header lacks encoder configuration".into()))?;
        let head = ckpt
            .header
            .head
            .clone()
            .ok_or_else(|| Error::Checkpoint("header lacks head configuration".into()))?;
        let mut model = Self::new(&config, head, ckpt.header.seed, DType::F32, device)?;
        restore(&model.varmap, &ckpt.params, None)?;
        model.projector = ckpt.header.projector.clone();
        Ok(model)
    }

    pub fn header(&self, step: usize, provenance: BTreeMap<String, String>) -> CheckpointHeader {
        let mut h = CheckpointHeader::new(CheckpointKind::MetaTrain, self.encoder.config.pyramid.clone(), step, self.seed);
        h.encoders = Some(self.encoder.config.clone());
        h.head = Some(self.head.clone());
        h.projector = self.projector.clone();
        h.provenance = provenance;
        h
    }

    pub fn save(
        &self,
        dir: &Path,
        step: usize,
        provenance: BTreeMap<String, String>,
        optimizer: Option<&AdamW>,
    ) -> Result<PathBuf> {
        let opt_state = optimizer.map(|o| o.state());
        save_checkpoint(dir, self.header(step, provenance), &snapshot(&self.varmap)?, opt_state.as_ref())
    }

    /// `(Z_G, Z_L)` for a `(B, 3, H, W)` batch.
    pub fn embed(&self, images: &Tensor, train: bool) -> Result<(Tensor, Tensor)> {
        self.encoder.forward(images, train)
    }

    /// Per enabled scale, the `(B, D_s)` feature tensor.
    pub fn scale_features(&self, z_g: &Tensor, z_l: &Tensor) -> Result<Vec<Tensor>> {
        let mix = if self.head.needs_projector() {
            let proj = self
                .projector
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("the mix scale requires a fitted PCA projector".into()))?;
            Some(mix_tensors(z_g, z_l, proj)?)
        } else {
            None
        };
        Ok(self
            .head
            .scales
            .iter()
            .map(|s| match s {
                Scale::Global => z_g.clone(),
                Scale::Local => z_l.clone(),
                Scale::Mix => mix.clone().expect("projector checked above"),
            })
            .collect())
    }

    /// Embed support and query images in one pass and score the queries.
    pub fn episode_scores(
        &self,
        support: &Tensor,
        support_labels: &[usize],
        query: &Tensor,
        train: bool,
    ) -> Result<ScoreTensors> {
        let ns = support.dim(0)?;
        let nq = query.dim(0)?;
        let (z_g, z_l) = self.embed(&Tensor::cat(&[support, query], 0)?, train)?;
        let feats = self.scale_features(&z_g, &z_l)?;
        let avg = averaging_matrix(support_labels, self.dtype, &self.device)?;
        let mut qs = Vec::with_capacity(feats.len());
        let mut ps = Vec::with_capacity(feats.len());
        for f in feats {
            ps.push(avg.matmul(&f.narrow(0, 0, ns)?)?);
            qs.push(f.narrow(0, ns, nq)?);
        }
        score_tensors(&qs, &ps, &self.head)
    }

    /// Inference-mode features of the given samples as `f64` rows.
    pub fn embed_indices(&self, dataset: &Dataset, indices: &[usize]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let mut g = Vec::with_capacity(indices.len());
        let mut l = Vec::with_capacity(indices.len());
        for chunk in indices.chunks(EMBED_BATCH) {
            let images = dataset.batch(chunk, self.dtype, &self.device)?;
            let (zg, zl) = self.embed(&images, false)?;
            g.extend(zg.to_dtype(DType::F64)?.to_vec2::<f64>()?);
            l.extend(zl.to_dtype(DType::F64)?.to_vec2::<f64>()?);
        }
        Ok((g, l))
    }

    pub fn embed_dataset(&self, dataset: &Dataset) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let all: Vec<usize> = (0..dataset.len()).collect();
        self.embed_indices(dataset, &all)
    }

    /// Multi-scale features from `f64` channel rows, mixing through the
    /// current projector when one is fitted.
    pub fn multi_scale(&self, z_g: &[Vec<f64>], z_l: &[Vec<f64>]) -> Result<Vec<MultiScaleFeature>> {
        z_g.iter()
            .zip(z_l)
            .map(|(g, l)| match &self.projector {
                Some(p) => super::prototypes::mix_features(g, l, p),
                None => Ok(MultiScaleFeature::without_mix(g.clone(), l.clone())),
            })
            .collect()
    }

    /// Refit the projector on up to `bank_size` base samples (drawn with the
    /// `(seed, round)` feature-bank stream).
    pub fn refresh_projector(&mut self, base: &Dataset, bank_size: usize, round: u64) -> Result<()> {
        let m = bank_size.min(base.len());
        let mut rng = stream(self.seed, StreamDomain::FeatureBank, round);
        let mut idx = sample_indices(&mut rng, base.len(), m).into_vec();
        idx.sort_unstable();
        let (g, l) = self.embed_indices(base, &idx)?;
        let provenance = format!("{} ({}), {m} samples, round {round}", base.name, base.split);
        self.projector = Some(fit_pca(&g, &l, self.dim() / 2, provenance)?);
        Ok(())
    }
}
