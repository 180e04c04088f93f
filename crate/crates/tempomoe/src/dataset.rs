//! Manifests, skeleton assets, synthetic corpus generation and loading.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tempomoe_core::dataset::{make_windows, synth_pair, NormStats, Pair, Window};
use tempomoe_core::kinematics::{motion_dim, MotionSequence, Skeleton};

use crate::container::{load_motion, load_music, save_motion, save_music};
use crate::error::{AppError, AppResult};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SKELETON_FILE: &str = "skeleton.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub music_path: String,
    pub motion_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bpm: Option<f64>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    pub fps: f64,
    pub motion_dim: usize,
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> AppResult<T> {
    let text = fs::read_to_string(path).map_err(|e| AppError::input(path, e))?;
    serde_json::from_str(&text).map_err(|e| AppError::invalid(format!("{}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> AppResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| AppError::runtime(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| AppError::io(path, e))
}

pub fn load_skeleton(path: &Path) -> AppResult<Skeleton> {
    let s: Skeleton = read_json(path)?;
    s.validate().map_err(|e| AppError::from(e).context(path))?;
    Ok(s)
}

/// Built-in skeleton for a channel count: 24 joints → SMPL, 3 → toy chain.
pub fn builtin_skeleton(d: usize) -> Option<Skeleton> {
    [Skeleton::smpl24(), Skeleton::toy3()].into_iter().find(|s| motion_dim(s.joints) == d)
}

pub fn skeleton_by_name(name: &str) -> AppResult<Skeleton> {
    match name {
        "smpl24" => Ok(Skeleton::smpl24()),
        "toy3" => Ok(Skeleton::toy3()),
        path => load_skeleton(Path::new(path)),
    }
}

/// A manifest with its directory, used to resolve relative paths.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub skeleton: Skeleton,
}

impl Dataset {
    pub fn open(manifest_path: &Path) -> AppResult<Self> {
        let manifest: Manifest = read_json(manifest_path)?;
        let root = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
        if manifest.entries.is_empty() {
            return Err(AppError::invalid(format!("{}: manifest has no entries", manifest_path.display())));
        }
        let sk_path = root.join(SKELETON_FILE);
        let skeleton = if sk_path.exists() {
            load_skeleton(&sk_path)?
        } else {
            builtin_skeleton(manifest.motion_dim).ok_or_else(|| {
                AppError::invalid(format!("no {SKELETON_FILE} beside the manifest and no built-in skeleton for d={}", manifest.motion_dim))
            })?
        };
        if motion_dim(skeleton.joints) != manifest.motion_dim {
            return Err(AppError::invalid(format!(
                "skeleton has {} joints (d={}) but manifest declares d={}",
                skeleton.joints,
                motion_dim(skeleton.joints),
                manifest.motion_dim
            )));
        }
        Ok(Self { root, manifest, skeleton })
    }

    /// Loads every pair in `split` (all pairs when `None`), checking fps and d.
    pub fn pairs(&self, split: Option<Split>) -> AppResult<Vec<Pair>> {
        let mut out = Vec::new();
        for e in self.manifest.entries.iter().filter(|e| split.is_none_or(|s| e.split == s)) {
            let music = load_music(&self.root.join(&e.music_path))?;
            let motion = load_motion(&self.root.join(&e.motion_path))?;
            for (what, fps) in [("music", music.fps), ("motion", motion.fps)] {
                if (fps - self.manifest.fps).abs() > 1e-3 {
                    return Err(AppError::invalid(format!("{what} `{}` has fps {fps}, manifest says {}", e.music_path, self.manifest.fps)));
                }
            }
            if motion.dim() != self.manifest.motion_dim {
                return Err(AppError::invalid(format!(
                    "motion `{}` has d={}, manifest says {}",
                    e.motion_path,
                    motion.dim(),
                    self.manifest.motion_dim
                )));
            }
            let id = Path::new(&e.motion_path).file_stem().map_or_else(|| e.motion_path.clone(), |s| s.to_string_lossy().into_owned());
            out.push(Pair { id, music, motion, bpm: e.bpm });
        }
        Ok(out)
    }

    pub fn windows(&self, split: Option<Split>, window: usize, stride: usize) -> AppResult<(Vec<Pair>, Vec<Window>)> {
        let pairs = self.pairs(split)?;
        let w = make_windows(&pairs, window, stride)?;
        Ok((pairs, w))
    }
}

pub fn fit_stats(pairs: &[Pair]) -> AppResult<NormStats> {
    let motions: Vec<MotionSequence> = pairs.iter().map(|p| p.motion.clone()).collect();
    Ok(NormStats::fit(&motions)?)
}

#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub bpms: Vec<f64>,
    pub per_bpm: usize,
    pub frames: usize,
    pub fps: f64,
    /// Pairs per tempo sent to the validation split.
    pub val_per_bpm: usize,
    pub seed: u64,
}

/// Writes a synthetic corpus (containers, sidecars, skeleton, manifest) into `out`.
pub fn make_data(out: &Path, spec: &SynthSpec, skel: &Skeleton) -> AppResult<PathBuf> {
    if spec.per_bpm == 0 || spec.bpms.is_empty() {
        return Err(AppError::invalid("need at least one tempo and one pair per tempo"));
    }
    if spec.val_per_bpm >= spec.per_bpm && spec.val_per_bpm > 0 {
        return Err(AppError::invalid("val-per-bpm must leave at least one training pair per tempo"));
    }
    for dir in ["music", "motion"] {
        let p = out.join(dir);
        fs::create_dir_all(&p).map_err(|e| AppError::io(&p, e))?;
    }
    let mut entries = Vec::new();
    for (bi, &bpm) in spec.bpms.iter().enumerate() {
        for k in 0..spec.per_bpm {
            let seed = spec.seed.wrapping_mul(1_000_003).wrapping_add((bi * 10_007 + k) as u64);
            let (music, motion) = synth_pair(bpm, spec.frames, spec.fps, skel, seed)?;
            let id = format!("bpm{}_{k:03}", fmt_bpm(bpm));
            let music_path = format!("music/{id}.tmoe");
            let motion_path = format!("motion/{id}.tmoe");
            save_music(&out.join(&music_path), &music, Some(bpm))?;
            save_motion(&out.join(&motion_path), &motion, Some(bpm))?;
            let split = if k >= spec.per_bpm - spec.val_per_bpm { Split::Val } else { Split::Train };
            entries.push(ManifestEntry { music_path, motion_path, bpm: Some(bpm), split });
        }
    }
    write_json(&out.join(SKELETON_FILE), skel)?;
    let manifest = Manifest { entries, fps: spec.fps, motion_dim: motion_dim(skel.joints) };
    let path = out.join(MANIFEST_FILE);
    write_json(&path, &manifest)?;
    Ok(path)
}

fn fmt_bpm(bpm: f64) -> String {
    if bpm.fract() == 0.0 {
        format!("{}", bpm as i64)
    } else {
        format!("{bpm}").replace('.', "p")
    }
}
