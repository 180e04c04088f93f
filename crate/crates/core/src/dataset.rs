//! Synthetic tempo-conditioned pairs, normalisation statistics and windowing.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::{axis_angle, matrix_to_rot6d, motion_dim, MotionSequence, Skeleton, ROOT_OFFSET, ROT_OFFSET};
use crate::music::{frames_per_beat, synth_click_features, MusicFeatures};
use crate::tensor::Tensor;

pub const SYNTH_MIN_BPM: f64 = 60.0;
pub const SYNTH_MAX_BPM: f64 = 200.0;
/// Peak joint swing in radians at 60 BPM; scales with `60/bpm`.
pub const SWING_AT_60: f64 = 0.8;
pub const DEFAULT_WINDOW: usize = 256;
pub const DEFAULT_STRIDE: usize = 128;
pub const STD_FLOOR: f64 = 1e-6;

const ROOT_SWAY: f64 = 0.05;
const ROOT_PERIOD_SECS: f64 = 8.0;

pub fn swing_amplitude(bpm: f64) -> f64 {
    SWING_AT_60 * 60.0 / bpm
}

/// Music click track and a motion whose joint speed bottoms out on every beat.
///
/// Every non-root joint swings about a seeded axis as `A·u_j·cos(π t/F_b)`,
/// so joint speed has period `F_b` with zeros on the click grid. Contacts
/// alternate feet per beat; the root drifts on a slow sinusoid.
pub fn synth_pair(bpm: f64, len: usize, fps: f64, skel: &Skeleton, seed: u64) -> Result<(MusicFeatures, MotionSequence)> {
    if !(SYNTH_MIN_BPM..=SYNTH_MAX_BPM).contains(&bpm) {
        return Err(Error::OutOfRange(format!("bpm {bpm} outside [{SYNTH_MIN_BPM}, {SYNTH_MAX_BPM}]")));
    }
    let music = synth_click_features(bpm, len, fps, seed)?;
    let fb = frames_per_beat(fps, bpm);
    let j = skel.joints;
    let d = motion_dim(j);
    let amp = swing_amplitude(bpm);

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_da9c_e000_0001);
    let joints: Vec<([f64; 3], f64)> = (0..j)
        .map(|_| {
            let v: [f64; 3] = [0, 1, 2].map(|_| rng.random_range(-1.0..1.0));
            let n = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>()).max(1e-3);
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            (v.map(|x| x / n), sign * rng.random_range(0.5..1.0))
        })
        .collect();
    let root_phase = rng.random_range(0.0..2.0 * PI);

    let mut data = vec![0.0f32; len * d];
    for t in 0..len {
        let row = &mut data[t * d..(t + 1) * d];
        let beat = libm::floor(t as f64 / fb) as usize;
        let left = beat % 2 == 0;
        row[0] = left as u8 as f32;
        row[2] = left as u8 as f32;
        row[1] = (!left) as u8 as f32;
        row[3] = (!left) as u8 as f32;
        let secs = t as f64 / fps;
        let sway = ROOT_SWAY * libm::sin(2.0 * PI * secs / ROOT_PERIOD_SECS + root_phase);
        row[ROOT_OFFSET] = sway as f32;
        row[ROOT_OFFSET + 1] = 1.0;
        row[ROOT_OFFSET + 2] = (0.5 * sway) as f32;
        let phase = libm::cos(PI * t as f64 / fb);
        for (jj, &(axis, u)) in joints.iter().enumerate() {
            let angle = if jj == 0 { 0.0 } else { amp * u * phase };
            let r6 = matrix_to_rot6d(&axis_angle(axis, angle));
            for (k, v) in r6.iter().enumerate() {
                row[ROT_OFFSET + 6 * jj + k] = *v as f32;
            }
        }
    }
    let motion = MotionSequence::new(Tensor::new(&[len, d], data)?, fps, j)?;
    Ok((music, motion))
}

/// Per-channel mean/std over a training split; contact channels pass through.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn fit(motions: &[MotionSequence]) -> Result<Self> {
        let first = motions.first().ok_or_else(|| Error::Invalid(String::from("no motions to fit")))?;
        let d = first.dim();
        let mut sum = vec![0.0f64; d];
        let mut n = 0usize;
        for m in motions {
            if m.dim() != d {
                return Err(Error::Shape { expected: vec![d], got: vec![m.dim()] });
            }
            for row in m.frames().data().chunks(d) {
                for (s, &v) in sum.iter_mut().zip(row) {
                    *s += v as f64;
                }
            }
            n += m.len();
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let mut var = vec![0.0f64; d];
        for m in motions {
            for row in m.frames().data().chunks(d) {
                for ((v, &x), mu) in var.iter_mut().zip(row).zip(&mean) {
                    *v += (x as f64 - mu).powi(2);
                }
            }
        }
        let mut stats = Self {
            mean,
            std: var.iter().map(|v| libm::sqrt(v / n as f64).max(STD_FLOOR)).collect(),
        };
        for c in 0..crate::kinematics::CONTACT_DIM.min(d) {
            stats.mean[c] = 0.0;
            stats.std[c] = 1.0;
        }
        Ok(stats)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, d: usize) -> Result<()> {
        if d != self.dim() {
            return Err(Error::Shape { expected: vec![self.dim()], got: vec![d] });
        }
        Ok(())
    }

    pub fn normalize_frames(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.check(x.cols())?;
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(self.dim()) {
            for ((v, mu), sd) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = ((*v as f64 - mu) / sd) as f32;
            }
        }
        Ok(out)
    }

    pub fn denormalize_frames<S: crate::tensor::Real>(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        self.check(x.cols())?;
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(self.dim()) {
            for ((v, mu), sd) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = S::of(v.f64() * sd + mu);
            }
        }
        Ok(out)
    }

    pub fn normalize(&self, m: &MotionSequence) -> Result<MotionSequence> {
        MotionSequence::new(self.normalize_frames(m.frames())?, m.fps, m.joints())
    }

    pub fn denormalize(&self, m: &MotionSequence) -> Result<MotionSequence> {
        MotionSequence::new(self.denormalize_frames(m.frames())?, m.fps, m.joints())
    }
}

/// Window start frames. A sequence shorter than `window` yields one window
/// covering it whole.
pub fn window_starts(len: usize, window: usize, stride: usize) -> Vec<usize> {
    if len <= window {
        return if len == 0 { Vec::new() } else { vec![0] };
    }
    (0..=(len - window) / stride.max(1)).map(|i| i * stride.max(1)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pair {
    pub id: String,
    pub music: MusicFeatures,
    pub motion: MotionSequence,
    pub bpm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    /// Index into the pair list.
    pub pair: usize,
    pub start: usize,
    pub music: MusicFeatures,
    pub motion: MotionSequence,
}

/// Cuts aligned windows from each pair; windows never span two pairs.
pub fn make_windows(pairs: &[Pair], window: usize, stride: usize) -> Result<Vec<Window>> {
    let mut out = Vec::new();
    for (i, p) in pairs.iter().enumerate() {
        if p.music.len() != p.motion.len() {
            return Err(Error::Invalid(format!(
                "pair `{}`: music has {} frames but motion has {}",
                p.id,
                p.music.len(),
                p.motion.len()
            )));
        }
        let len = p.motion.len();
        let w = window.min(len);
        for start in window_starts(len, window, stride) {
            out.push(Window {
                pair: i,
                start,
                music: p.music.window(start, w),
                motion: p.motion.window(start, w),
            });
        }
    }
    Ok(out)
}

/// Deterministic permutation of `0..n` for a given seed and epoch.
pub fn shuffled_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(epoch));
    idx.shuffle(&mut rng);
    idx
}
