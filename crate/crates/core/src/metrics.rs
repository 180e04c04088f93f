//! Beat alignment, kinetic/geometric motion features, Fréchet distance and
//! diversity.
//!
//! These extractors are small stand-ins for the usual fairmotion features.
//! They support relative comparisons and property tests; their absolute
//! values are not comparable to published benchmark numbers.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::{forward_kinematics, forward_kinematics_raw, time_diff, MotionSequence, Skeleton};
use crate::tensor::Tensor;

pub const DEFAULT_SIGMA_FRAMES: f64 = 3.0;
pub const SMOOTH_WINDOW: usize = 5;
pub const MIN_FRAMES: usize = 5;
pub const GEOMETRIC_DIM: usize = 32;
pub const COV_RIDGE: f64 = 1e-6;

const CLOSER_THAN_REST: f64 = 0.95;
const HEIGHT_MARGIN: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Kinetic,
    Geometric,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    /// N×F, one row per sequence.
    pub vectors: Tensor<f64>,
    pub kind: FeatureKind,
}

impl FeatureSet {
    pub fn new(rows: Vec<Vec<f64>>, kind: FeatureKind) -> Result<Self> {
        let f = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != f) {
            return Err(Error::Invalid("feature rows differ in length".into()));
        }
        let n = rows.len();
        let vectors = Tensor::matrix(n, f, rows.into_iter().flatten().collect())?;
        if !vectors.is_finite() {
            return Err(Error::Invalid("non-finite feature".into()));
        }
        Ok(Self { vectors, kind })
    }

    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeatSet {
    pub frames: Vec<usize>,
    pub fps: f64,
}

fn check_len(l: usize) -> Result<()> {
    if l < MIN_FRAMES {
        return Err(Error::TooShort { needed: MIN_FRAMES, got: l });
    }
    Ok(())
}

/// Per-frame joint speed `[L×J]`: forward differences averaged onto frames,
/// so frame `i` sees `(x[i+1]-x[i-1])/2`.
fn joint_speeds(pos: &Tensor<f64>, fps: f64) -> Result<Tensor<f64>> {
    let (l, k) = pos.dims();
    let j = k / 3;
    let d = time_diff(pos, 1, fps)?;
    let mut out = Tensor::zeros(&[l, j]);
    for t in 0..l {
        let prev = if t > 0 { Some(d.row(t - 1)) } else { None };
        let next = if t + 1 < l { Some(d.row(t)) } else { None };
        for jj in 0..j {
            let v: [f64; 3] = core::array::from_fn(|c| match (prev, next) {
                (Some(p), Some(n)) => 0.5 * (p[3 * jj + c] + n[3 * jj + c]),
                (Some(p), None) => p[3 * jj + c],
                (None, Some(n)) => n[3 * jj + c],
                (None, None) => 0.0,
            });
            out.set(t, jj, libm::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]));
        }
    }
    Ok(out)
}

/// Centered moving average; the window shrinks at the edges.
pub fn moving_average(x: &[f64], window: usize) -> Vec<f64> {
    let half = window / 2;
    (0..x.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(x.len());
            x[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

/// Strict local minima; the two end frames count when they are strictly
/// below their single neighbour.
pub fn local_minima(x: &[f64]) -> Vec<usize> {
    let n = x.len();
    (0..n)
        .filter(|&i| {
            let left = i == 0 || x[i] < x[i - 1];
            let right = i + 1 == n || x[i] < x[i + 1];
            n > 1 && left && right
        })
        .collect()
}

/// Kinematic beats: local minima of the smoothed mean joint speed.
pub fn detect_dance_beats(motion: &MotionSequence, skel: &Skeleton) -> Result<BeatSet> {
    check_len(motion.len())?;
    let pos = forward_kinematics(motion, skel)?;
    detect_beats_from_positions(&pos, motion.fps)
}

pub fn detect_beats_from_positions(pos: &Tensor<f64>, fps: f64) -> Result<BeatSet> {
    check_len(pos.rows())?;
    let speed = joint_speeds(pos, fps)?;
    let j = speed.cols() as f64;
    let mean: Vec<f64> = (0..speed.rows()).map(|t| speed.row(t).iter().sum::<f64>() / j).collect();
    // rounding noise on a static pose must not produce beats
    let peak = mean.iter().fold(0.0f64, |a, &b| a.max(b));
    if peak < 1e-9 {
        return Ok(BeatSet { frames: Vec::new(), fps });
    }
    Ok(BeatSet { frames: local_minima(&moving_average(&mean, SMOOTH_WINDOW)), fps })
}

/// Mean over music beats of `exp(-d²/2σ²)`, `d` the distance to the nearest
/// dance beat. Zero when there are no dance beats.
pub fn beat_alignment_score(music: &BeatSet, dance: &BeatSet, sigma_frames: f64) -> Result<f64> {
    if music.frames.is_empty() {
        return Err(Error::Invalid("no music beats".into()));
    }
    if !(sigma_frames > 0.0) {
        return Err(Error::OutOfRange("sigma must be positive".into()));
    }
    if dance.frames.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = music
        .frames
        .iter()
        .map(|&m| {
            let i = dance.frames.partition_point(|&d| d < m);
            let mut best = f64::INFINITY;
            for k in [i.wrapping_sub(1), i] {
                if let Some(&d) = dance.frames.get(k) {
                    best = best.min((d as f64 - m as f64).abs());
                }
            }
            libm::exp(-best * best / (2.0 * sigma_frames * sigma_frames))
        })
        .sum();
    Ok(total / music.frames.len() as f64)
}

/// Per-joint mean squared speed, one entry per joint.
pub fn kinetic_features(pos: &Tensor<f64>, fps: f64) -> Result<Vec<f64>> {
    check_len(pos.rows())?;
    let d = time_diff(pos, 1, fps)?;
    let j = pos.cols() / 3;
    let l = d.rows() as f64;
    Ok((0..j)
        .map(|jj| (0..d.rows()).map(|t| (0..3).map(|c| d.at(t, 3 * jj + c).powi(2)).sum::<f64>()).sum::<f64>() / l)
        .collect())
}

/// The fixed descriptor list for a skeleton.
///
/// All unordered joint pairs `(a<b)` are enumerated lexicographically and 16
/// are taken at evenly spaced positions. Descriptor `k<16` fires when the pair
/// is closer than 0.95× its rest-pose distance; descriptor `16+k` fires when
/// joint `a` sits higher (y) than joint `b` by more than 5% of the mean bone
/// length, using the pair list shifted by half a stride.
pub fn geometric_pairs(joints: usize) -> Vec<(usize, usize)> {
    let all: Vec<(usize, usize)> = (0..joints).flat_map(|a| (a + 1..joints).map(move |b| (a, b))).collect();
    if all.is_empty() {
        return Vec::new();
    }
    let n = all.len();
    let half = GEOMETRIC_DIM / 2;
    (0..half).map(|k| all[k * n / half]).chain((0..half).map(|k| all[(k * n / half + n / GEOMETRIC_DIM) % n])).collect()
}

fn dist(p: &[f64], a: usize, b: usize) -> f64 {
    libm::sqrt((0..3).map(|c| (p[3 * a + c] - p[3 * b + c]).powi(2)).sum())
}

/// Fraction of frames on which each of the 32 pose descriptors holds.
pub fn geometric_features(pos: &Tensor<f64>, skel: &Skeleton) -> Result<Vec<f64>> {
    check_len(pos.rows())?;
    let j = skel.joints;
    if pos.cols() != 3 * j || j < 2 {
        return Err(Error::Shape { expected: vec![pos.rows(), 3 * j], got: vec![pos.rows(), pos.cols()] });
    }
    let rest = rest_positions(skel)?;
    let bone = skel.offsets.iter().skip(1).map(|o| libm::sqrt(o.iter().map(|v| v * v).sum())).sum::<f64>() / (j - 1) as f64;
    let pairs = geometric_pairs(j);
    let half = GEOMETRIC_DIM / 2;
    let mut counts = vec![0usize; GEOMETRIC_DIM];
    for t in 0..pos.rows() {
        let p = pos.row(t);
        for (k, &(a, b)) in pairs.iter().enumerate() {
            let hit = if k < half {
                dist(p, a, b) < CLOSER_THAN_REST * dist(&rest, a, b)
            } else {
                p[3 * a + 1] > p[3 * b + 1] + HEIGHT_MARGIN * bone
            };
            counts[k] += hit as usize;
        }
    }
    Ok(counts.iter().map(|&c| c as f64 / pos.rows() as f64).collect())
}

fn rest_positions(skel: &Skeleton) -> Result<Vec<f64>> {
    let d = crate::kinematics::motion_dim(skel.joints);
    let mut frame = vec![0.0f64; d];
    for jj in 0..skel.joints {
        let o = crate::kinematics::ROT_OFFSET + 6 * jj;
        frame[o] = 1.0;
        frame[o + 4] = 1.0;
    }
    let pos = forward_kinematics_raw(&Tensor::matrix(1, d, frame)?, skel)?;
    Ok(pos.into_data())
}

pub fn extract_features(motion: &MotionSequence, skel: &Skeleton, kind: FeatureKind) -> Result<Vec<f64>> {
    check_len(motion.len())?;
    let pos = forward_kinematics(motion, skel)?;
    match kind {
        FeatureKind::Kinetic => kinetic_features(&pos, motion.fps),
        FeatureKind::Geometric => geometric_features(&pos, skel),
    }
}

fn mean_cov(x: &Tensor<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let (n, f) = x.dims();
    let m = DMatrix::from_row_slice(n, f, x.data());
    let mu = DVector::from_iterator(f, (0..f).map(|c| m.column(c).sum() / n as f64));
    let mut centered = m.clone();
    for mut row in centered.row_iter_mut() {
        row -= mu.transpose();
    }
    let mut cov = centered.transpose() * &centered / (n as f64 - 1.0);
    for i in 0..f {
        cov[(i, i)] += COV_RIDGE;
    }
    (mu, cov)
}

fn sym_eigen(m: DMatrix<f64>) -> SymmetricEigen<f64, nalgebra::Dyn> {
    let s = (&m + m.transpose()) * 0.5;
    SymmetricEigen::new(s)
}

fn psd_sqrt(m: DMatrix<f64>) -> DMatrix<f64> {
    let e = sym_eigen(m);
    let d = DMatrix::from_diagonal(&e.eigenvalues.map(|v| libm::sqrt(v.max(0.0))));
    &e.eigenvectors * d * e.eigenvectors.transpose()
}

/// Fréchet distance between Gaussians fitted to two feature sets.
pub fn fid(a: &FeatureSet, b: &FeatureSet) -> Result<f64> {
    if a.kind != b.kind {
        return Err(Error::Invalid("feature kinds differ".into()));
    }
    if a.dim() != b.dim() {
        return Err(Error::Shape { expected: vec![a.dim()], got: vec![b.dim()] });
    }
    for s in [a, b] {
        if s.len() < 2 {
            return Err(Error::TooShort { needed: 2, got: s.len() });
        }
    }
    let (mu_a, cov_a) = mean_cov(&a.vectors);
    let (mu_b, cov_b) = mean_cov(&b.vectors);
    let root_a = psd_sqrt(cov_a.clone());
    let inner = &root_a * &cov_b * &root_a;
    let tr_cross: f64 = sym_eigen(inner).eigenvalues.iter().map(|v| libm::sqrt(v.max(0.0))).sum();
    let d = (mu_a - mu_b).norm_squared() + cov_a.trace() + cov_b.trace() - 2.0 * tr_cross;
    Ok(d.max(0.0))
}

/// Mean Euclidean distance over `pairs` seeded random pairs of distinct rows.
pub fn diversity(a: &FeatureSet, pairs: usize, seed: u64) -> Result<f64> {
    let n = a.len();
    if n < 2 {
        return Err(Error::TooShort { needed: 2, got: n });
    }
    if pairs == 0 {
        return Err(Error::Invalid("diversity needs at least one pair".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total: f64 = (0..pairs)
        .map(|_| {
            let i = rng.random_range(0..n);
            let j = (i + rng.random_range(1..n)) % n;
            row_distance(&a.vectors, i, j)
        })
        .sum();
    Ok(total / pairs as f64)
}

fn row_distance(x: &Tensor<f64>, i: usize, j: usize) -> f64 {
    libm::sqrt(x.row(i).iter().zip(x.row(j)).map(|(a, b)| (a - b).powi(2)).sum())
}
