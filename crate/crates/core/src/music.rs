//! Frame-level music features: the fixed 35-channel layout, a synthetic
//! click-track generator, and onset-autocorrelation tempo estimation.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;
use core::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MUSIC_DIM: usize = 35;
pub const DEFAULT_FPS: f64 = 30.0;
pub const MIN_BPM: f64 = 30.0;
pub const MAX_BPM: f64 = 300.0;

/// Named channel slices of the feature matrix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelMap {
    pub energy: Range<usize>,
    pub mfcc: Range<usize>,
    pub chroma: Range<usize>,
    pub onset: Range<usize>,
    pub beat: Range<usize>,
}

impl Default for ChannelMap {
    fn default() -> Self {
        Self { energy: 0..1, mfcc: 1..21, chroma: 21..33, onset: 33..34, beat: 34..35 }
    }
}

pub const ONSET: usize = 33;
pub const BEAT: usize = 34;

#[derive(Debug, Clone, PartialEq)]
pub struct MusicFeatures {
    frames: Tensor<f32>,
    pub fps: f64,
}

impl MusicFeatures {
    /// Validates the layout: 35 channels, finite values, binary beats and
    /// nonnegative onsets.
    pub fn new(frames: Tensor<f32>, fps: f64) -> Result<Self> {
        let (_, d) = frames.dims();
        if d != MUSIC_DIM {
            return Err(Error::Shape { expected: vec![frames.rows(), MUSIC_DIM], got: frames.shape().to_vec() });
        }
        if !(fps > 0.0) {
            return Err(Error::OutOfRange(alloc::format!("fps {fps}")));
        }
        for (t, row) in frames.data().chunks(d).enumerate() {
            if let Some(c) = row.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite { frame: t, channel: c });
            }
            if row[BEAT] != 0.0 && row[BEAT] != 1.0 {
                return Err(Error::OutOfRange(alloc::format!("beat channel at frame {t} is {}", row[BEAT])));
            }
            if row[ONSET] < 0.0 {
                return Err(Error::OutOfRange(alloc::format!("negative onset at frame {t}")));
            }
        }
        Ok(Self { frames, fps })
    }

    pub fn frames(&self) -> &Tensor<f32> {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn channel(&self, c: usize) -> Vec<f64> {
        (0..self.len()).map(|t| self.frames.at(t, c) as f64).collect()
    }

    /// Frames whose beat channel is set.
    pub fn beat_frames(&self) -> Vec<usize> {
        (0..self.len()).filter(|&t| self.frames.at(t, BEAT) == 1.0).collect()
    }

    /// Rows `start..start+len` as a new feature matrix.
    pub fn window(&self, start: usize, len: usize) -> Self {
        let d = MUSIC_DIM;
        let data = self.frames.data()[start * d..(start + len) * d].to_vec();
        Self { frames: Tensor::from_parts(vec![len, d], data), fps: self.fps }
    }
}

pub fn frames_per_beat(fps: f64, bpm: f64) -> f64 {
    60.0 * fps / bpm
}

/// Beat frames `round(i·fps·60/bpm)` inside `[0, len)`.
pub fn click_frames(bpm: f64, len: usize, fps: f64) -> Vec<usize> {
    let spacing = frames_per_beat(fps, bpm);
    (0..)
        .map(|i| libm::round(i as f64 * spacing) as usize)
        .take_while(|&t| t < len)
        .collect()
}

/// Deterministic click-track features at a fixed tempo.
///
/// The beat channel fires on the click grid, onsets are Gaussian-smoothed
/// impulses on the same grid, energy is a raised cosine with the beat period,
/// and MFCC/chroma channels are seeded slow sinusoids modulated by energy.
pub fn synth_click_features(bpm: f64, len: usize, fps: f64, seed: u64) -> Result<MusicFeatures> {
    if !(MIN_BPM..=MAX_BPM).contains(&bpm) {
        return Err(Error::OutOfRange(alloc::format!("bpm {bpm} outside [{MIN_BPM}, {MAX_BPM}]")));
    }
    let spacing = frames_per_beat(fps, bpm);
    let needed = libm::ceil(2.0 * spacing) as usize;
    if len < needed {
        return Err(Error::TooShort { needed, got: len });
    }
    let beats = click_frames(bpm, len, fps);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // per timbre channel: (amplitude, frequency in Hz, phase, second-harmonic weight)
    let timbre: Vec<(f64, f64, f64, f64)> = (0..MUSIC_DIM - 3)
        .map(|_| {
            (
                rng.random_range(0.3..1.0),
                rng.random_range(0.05..0.8),
                rng.random_range(0.0..2.0 * PI),
                rng.random_range(0.0..0.5),
            )
        })
        .collect();

    let mut data = vec![0.0f32; len * MUSIC_DIM];
    for t in 0..len {
        let row = &mut data[t * MUSIC_DIM..(t + 1) * MUSIC_DIM];
        let energy = 0.5 + 0.5 * libm::cos(2.0 * PI * t as f64 / spacing);
        row[0] = energy as f32;
        let secs = t as f64 / fps;
        for (c, &(amp, freq, phase, h2)) in timbre.iter().enumerate() {
            let w = 2.0 * PI * freq * secs + phase;
            let v = amp * (libm::sin(w) + h2 * libm::sin(2.0 * w)) * (0.5 + 0.5 * energy);
            row[1 + c] = v as f32;
        }
        let onset: f64 = beats
            .iter()
            .map(|&b| {
                let d = t as f64 - b as f64;
                libm::exp(-d * d / 2.0)
            })
            .sum();
        row[ONSET] = onset as f32;
    }
    for &b in &beats {
        data[b * MUSIC_DIM + BEAT] = 1.0;
    }
    MusicFeatures::new(Tensor::from_parts(vec![len, MUSIC_DIM], data), fps)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TempoEstimate {
    pub bpm: f64,
    pub confidence: f64,
    /// False when the onset channel carries no periodicity to measure.
    pub valid: bool,
}

/// Tempo from the autocorrelation of the (mean-removed) onset channel.
///
/// The strongest lag in `[fps·60/300, fps·60/30]` is refined with parabolic
/// interpolation and then with the peaks at its integer multiples, which
/// averages out integer-frame rounding of the beat grid.
pub fn estimate_bpm(features: &MusicFeatures) -> Result<TempoEstimate> {
    let fps = features.fps;
    let n = features.len();
    let needed = libm::ceil(4.0 * fps) as usize;
    if n < needed {
        return Err(Error::TooShort { needed, got: n });
    }
    let onset = features.channel(ONSET);
    let mean = onset.iter().sum::<f64>() / n as f64;
    let x: Vec<f64> = onset.iter().map(|v| v - mean).collect();
    let r0: f64 = x.iter().map(|v| v * v).sum();
    let invalid = TempoEstimate { bpm: f64::NAN, confidence: 0.0, valid: false };
    if r0 <= 1e-12 {
        return Ok(invalid);
    }
    // biased autocorrelation favours the shortest period over its multiples
    let acf = |lag: usize| -> f64 { x[..n - lag].iter().zip(&x[lag..]).map(|(a, b)| a * b).sum::<f64>() / r0 };
    let min_lag = libm::floor(fps * 60.0 / MAX_BPM).max(1.0) as usize;
    let max_lag = (libm::ceil(fps * 60.0 / MIN_BPM) as usize).min(n - 2);
    let table: Vec<f64> = (0..=max_lag + 1).map(|l| if l < n { acf(l) } else { 0.0 }).collect();

    let mut best = (min_lag..=max_lag).max_by(|&a, &b| table[a].total_cmp(&table[b]).then(b.cmp(&a))).unwrap();
    if table[best] <= 0.0 {
        return Ok(invalid);
    }
    // a grid with alternating integer spacings peaks hardest at twice its period
    for div in (2..=4).rev() {
        let guess = libm::round(best as f64 / div as f64) as usize;
        if guess < min_lag {
            continue;
        }
        let peak = (guess - 1..=guess + 1).max_by(|&a, &b| table[a].total_cmp(&table[b])).unwrap();
        if table[peak] >= 0.5 * table[best] && table[peak] >= table[peak - 1] && table[peak] >= table[peak + 1] {
            best = peak;
            break;
        }
    }
    let mut period = refine_peak(&table, best);

    let mut m = 2;
    while libm::round(period * m as f64) as usize + 1 < table.len() && m <= 16 {
        let guess = libm::round(period * m as f64) as usize;
        let lo = guess.saturating_sub(1).max(1);
        let hi = (guess + 1).min(table.len() - 2);
        let peak = (lo..=hi).max_by(|&a, &b| table[a].total_cmp(&table[b])).unwrap();
        if table[peak] <= 0.0 {
            break;
        }
        period = refine_peak(&table, peak) / m as f64;
        m += 1;
    }

    let bpm = fps * 60.0 / period;
    if !(MIN_BPM..=MAX_BPM).contains(&bpm) {
        return Ok(TempoEstimate { bpm, confidence: 0.0, valid: false });
    }
    Ok(TempoEstimate { bpm, confidence: table[best].clamp(0.0, 1.0), valid: true })
}

fn refine_peak(table: &[f64], i: usize) -> f64 {
    if i == 0 || i + 1 >= table.len() {
        return i as f64;
    }
    let (a, b, c) = (table[i - 1], table[i], table[i + 1]);
    let denom = a - 2.0 * b + c;
    if denom.abs() < 1e-12 {
        return i as f64;
    }
    i as f64 + (0.5 * (a - c) / denom).clamp(-0.5, 0.5)
}
