//! The TMOE frame container and its JSON sidecar.
//!
//! Layout: `b"TMOE"`, then little-endian `u32 version`, `u32 rows`,
//! `u32 cols`, `f32 fps`, then `rows·cols` little-endian `f32` row-major.

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tempomoe_core::kinematics::MotionSequence;
use tempomoe_core::music::{ChannelMap, MusicFeatures, MUSIC_DIM};
use tempomoe_core::Tensor;

use crate::error::{AppError, AppResult};

pub const MAGIC: &[u8; 4] = b"TMOE";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct Frames {
    pub data: Tensor<f32>,
    pub fps: f32,
}

pub fn encode(frames: &Tensor<f32>, fps: f32) -> Vec<u8> {
    let (rows, cols) = frames.dims();
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * frames.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(rows as u32).to_le_bytes());
    out.extend_from_slice(&(cols as u32).to_le_bytes());
    out.extend_from_slice(&fps.to_le_bytes());
    for v in frames.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

pub fn decode(bytes: &[u8]) -> AppResult<Frames> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(AppError::invalid("corrupt header: missing TMOE magic"));
    }
    let version = u32_at(bytes, 4);
    if version != VERSION {
        return Err(AppError::invalid(format!("unsupported TMOE version {version}")));
    }
    let rows = u32_at(bytes, 8) as usize;
    let cols = u32_at(bytes, 12) as usize;
    let fps = f32::from_le_bytes(bytes[16..20].try_into().expect("4 bytes"));
    let want = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| AppError::invalid("corrupt header: size overflow"))?;
    if bytes.len() - HEADER_LEN != want {
        return Err(AppError::invalid(format!(
            "corrupt payload: header declares {rows}×{cols} but {} payload bytes present",
            bytes.len() - HEADER_LEN
        )));
    }
    if !(fps.is_finite() && fps > 0.0) {
        return Err(AppError::invalid(format!("corrupt header: fps {fps}")));
    }
    let data = bytes[HEADER_LEN..].chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Ok(Frames { data: Tensor::new(&[rows, cols], data)?, fps })
}

pub fn write_frames(path: &Path, frames: &Tensor<f32>, fps: f32) -> AppResult<()> {
    let mut f = fs::File::create(path).map_err(|e| AppError::io(path, e))?;
    f.write_all(&encode(frames, fps)).map_err(|e| AppError::io(path, e))
}

pub fn read_frames(path: &Path) -> AppResult<Frames> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| AppError::input(path, e))?;
    decode(&buf).map_err(|e| e.context(path))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Music,
    Motion,
}

/// `<name>.meta.json` next to a container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub kind: Kind,
    pub fps: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bpm: Option<f64>,
    pub channel_map: serde_json::Map<String, serde_json::Value>,
}

/// `dir/clip.tmoe` → `dir/clip.meta.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.meta.json"))
}

pub fn music_channel_map() -> serde_json::Map<String, serde_json::Value> {
    let m = ChannelMap::default();
    let mut out = serde_json::Map::new();
    for (name, r) in [
        ("energy", m.energy),
        ("mfcc", m.mfcc),
        ("chroma", m.chroma),
        ("onset", m.onset),
        ("beat", m.beat),
    ] {
        out.insert(name.into(), serde_json::json!({ "start": r.start, "len": r.len() }));
    }
    out
}

pub fn motion_channel_map(joints: usize) -> serde_json::Map<String, serde_json::Value> {
    use tempomoe_core::kinematics::{CONTACT_DIM, ROOT_OFFSET, ROT_OFFSET};
    let mut out = serde_json::Map::new();
    out.insert("contacts".into(), serde_json::json!({ "start": 0, "len": CONTACT_DIM }));
    out.insert("root".into(), serde_json::json!({ "start": ROOT_OFFSET, "len": 3 }));
    out.insert("rot6d".into(), serde_json::json!({ "start": ROT_OFFSET, "len": 6 * joints }));
    out
}

pub fn write_meta(path: &Path, meta: &Meta) -> AppResult<()> {
    let p = sidecar_path(path);
    let text = serde_json::to_string_pretty(meta).expect("meta serialises");
    fs::write(&p, text).map_err(|e| AppError::io(&p, e))
}

pub fn read_meta(path: &Path) -> AppResult<Option<Meta>> {
    let p = sidecar_path(path);
    match fs::read_to_string(&p) {
        Ok(text) => serde_json::from_str(&text).map(Some).map_err(|e| AppError::invalid(format!("{}: {e}", p.display()))),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(AppError::input(&p, e)),
    }
}

pub fn save_music(path: &Path, music: &MusicFeatures, bpm: Option<f64>) -> AppResult<()> {
    write_frames(path, music.frames(), music.fps as f32)?;
    write_meta(path, &Meta { kind: Kind::Music, fps: music.fps, bpm, channel_map: music_channel_map() })
}

pub fn load_music(path: &Path) -> AppResult<MusicFeatures> {
    let f = read_frames(path)?;
    if f.data.cols() != MUSIC_DIM {
        return Err(AppError::invalid(format!(
            "{}: music features need {MUSIC_DIM} channels, file has {}",
            path.display(),
            f.data.cols()
        )));
    }
    check_kind(path, Kind::Music)?;
    MusicFeatures::new(f.data, f.fps as f64).map_err(|e| AppError::from(e).context(path))
}

pub fn save_motion(path: &Path, motion: &MotionSequence, bpm: Option<f64>) -> AppResult<()> {
    write_frames(path, motion.frames(), motion.fps as f32)?;
    write_meta(path, &Meta { kind: Kind::Motion, fps: motion.fps, bpm, channel_map: motion_channel_map(motion.joints()) })
}

pub fn load_motion(path: &Path) -> AppResult<MotionSequence> {
    let f = read_frames(path)?;
    let joints = MotionSequence::joints_for_dim(f.data.cols())
        .ok_or_else(|| AppError::invalid(format!("{}: {} channels is not a motion layout", path.display(), f.data.cols())))?;
    check_kind(path, Kind::Motion)?;
    MotionSequence::new(f.data, f.fps as f64, joints).map_err(|e| AppError::from(e).context(path))
}

fn check_kind(path: &Path, want: Kind) -> AppResult<()> {
    if let Some(meta) = read_meta(path)? {
        if meta.kind != want {
            return Err(AppError::invalid(format!("{}: sidecar says {:?}, expected {:?}", path.display(), meta.kind, want)));
        }
    }
    Ok(())
}
