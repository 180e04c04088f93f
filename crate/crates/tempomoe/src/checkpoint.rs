//! Checkpoints: a JSON manifest plus a little-endian `f32` blob.
//!
//! The manifest names the blob (same stem, `.bin`) and lists every parameter
//! with its shape and byte offset, in model order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tempomoe_core::dataset::NormStats;
use tempomoe_core::denoiser::Denoiser;
use tempomoe_core::kinematics::Skeleton;
use tempomoe_core::nn::ParamStore;
use tempomoe_core::train::TrainConfig;
use tempomoe_core::Tensor;

use crate::error::{AppError, AppResult};

pub const FORMAT: &str = "tempomoe-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub blob: String,
    pub step: usize,
    pub fps: f64,
    pub config: TrainConfig,
    pub norm_stats: NormStats,
    pub skeleton: Skeleton,
    pub params: Vec<ParamEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub step: usize,
    pub fps: f64,
    pub stats: NormStats,
    pub skeleton: Skeleton,
    pub params: ParamStore<f32>,
}

pub fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> AppResult<()> {
        let blob = blob_path(path);
        let mut bytes = Vec::with_capacity(4 * self.params.count());
        let mut params = Vec::with_capacity(self.params.len());
        for (name, t) in self.params.names().iter().zip(self.params.tensors()) {
            params.push(ParamEntry { name: name.clone(), shape: t.shape().to_vec(), offset: bytes.len() as u64 });
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = CheckpointManifest {
            format: FORMAT.into(),
            version: FORMAT_VERSION,
            blob: blob.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
            step: self.step,
            fps: self.fps,
            config: self.config.clone(),
            norm_stats: self.stats.clone(),
            skeleton: self.skeleton.clone(),
            params,
        };
        if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
        }
        fs::write(&blob, bytes).map_err(|e| AppError::io(&blob, e))?;
        crate::dataset::write_json(path, &manifest)
    }

    pub fn load(path: &Path) -> AppResult<Self> {
        let m: CheckpointManifest = crate::dataset::read_json(path)?;
        if m.format != FORMAT || m.version != FORMAT_VERSION {
            return Err(AppError::invalid(format!("{}: not a v{FORMAT_VERSION} checkpoint", path.display())));
        }
        let blob = path.with_file_name(&m.blob);
        let bytes = fs::read(&blob).map_err(|e| AppError::input(&blob, e))?;
        let mut params = ParamStore::new();
        for p in &m.params {
            let n: usize = p.shape.iter().product();
            let start = p.offset as usize;
            let end = start + 4 * n;
            let raw = bytes
                .get(start..end)
                .ok_or_else(|| AppError::invalid(format!("{}: blob too short for `{}`", blob.display(), p.name)))?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            params.add(p.name.clone(), Tensor::new(&p.shape, data)?);
        }
        m.skeleton.validate()?;
        let ck = Self { config: m.config, step: m.step, fps: m.fps, stats: m.norm_stats, skeleton: m.skeleton, params };
        ck.model()?;
        Ok(ck)
    }

    /// Rebuilds the model structure and checks the stored parameters fit it.
    pub fn model(&self) -> AppResult<Denoiser> {
        let (model, fresh) = Denoiser::init::<f32>(self.config.denoiser.clone(), 0)?;
        if fresh.names() != self.params.names() {
            return Err(AppError::invalid("checkpoint parameters do not match the configured model"));
        }
        for (name, (a, b)) in fresh.names().iter().zip(fresh.tensors().iter().zip(self.params.tensors())) {
            if a.shape() != b.shape() {
                return Err(AppError::invalid(format!("parameter `{name}`: shape {:?}, model expects {:?}", b.shape(), a.shape())));
            }
        }
        if self.stats.dim() != self.config.denoiser.motion_dim {
            return Err(AppError::invalid("normalisation statistics do not match the motion dimension"));
        }
        Ok(model)
    }
}
