//! `eval`: sample against each clip's music and score the results.

use serde::{Deserialize, Serialize};
use tempomoe_core::dataset::Pair;
use tempomoe_core::denoiser::Denoiser;
use tempomoe_core::diffusion::SamplerConfig;
use tempomoe_core::kinematics::{MotionSequence, Skeleton};
use tempomoe_core::metrics::{
    beat_alignment_score, detect_dance_beats, diversity, extract_features, fid, BeatSet, FeatureKind, FeatureSet,
    DEFAULT_SIGMA_FRAMES,
};

use crate::checkpoint::Checkpoint;
use crate::error::{AppError, AppResult};
use crate::generate::generate;

pub const DIVERSITY_PAIRS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub fid_k: f64,
    pub fid_g: f64,
    pub div_k: f64,
    pub div_g: f64,
    pub bas_mean: f64,
    pub bas_per_sample: Vec<f64>,
}

pub fn bas_for(music_beats: Vec<usize>, motion: &MotionSequence, skel: &Skeleton) -> AppResult<f64> {
    let fps = motion.fps;
    let dance = detect_dance_beats(motion, skel)?;
    Ok(beat_alignment_score(&BeatSet { frames: music_beats, fps }, &dance, DEFAULT_SIGMA_FRAMES)?)
}

/// Scores generated motions against references and their music.
pub fn score(generated: &[MotionSequence], reference: &[MotionSequence], beats: &[Vec<usize>], skel: &Skeleton, seed: u64) -> AppResult<EvalReport> {
    if generated.len() < 2 || reference.len() < 2 {
        return Err(AppError::invalid("evaluation needs at least 2 clips"));
    }
    let feats = |ms: &[MotionSequence], kind| -> AppResult<FeatureSet> {
        let rows = ms.iter().map(|m| extract_features(m, skel, kind)).collect::<Result<Vec<_>, _>>()?;
        Ok(FeatureSet::new(rows, kind)?)
    };
    let (gk, gg) = (feats(generated, FeatureKind::Kinetic)?, feats(generated, FeatureKind::Geometric)?);
    let (rk, rg) = (feats(reference, FeatureKind::Kinetic)?, feats(reference, FeatureKind::Geometric)?);
    let bas_per_sample = generated
        .iter()
        .zip(beats)
        .map(|(m, b)| bas_for(b.clone(), m, skel))
        .collect::<AppResult<Vec<_>>>()?;
    Ok(EvalReport {
        fid_k: fid(&rk, &gk)?,
        fid_g: fid(&rg, &gg)?,
        div_k: diversity(&gk, DIVERSITY_PAIRS, seed)?,
        div_g: diversity(&gg, DIVERSITY_PAIRS, seed)?,
        bas_mean: bas_per_sample.iter().sum::<f64>() / bas_per_sample.len() as f64,
        bas_per_sample,
    })
}

pub fn evaluate(ck: &Checkpoint, model: &Denoiser, pairs: &[Pair], sampler: &SamplerConfig) -> AppResult<EvalReport> {
    let mut generated = Vec::with_capacity(pairs.len());
    for (i, p) in pairs.iter().enumerate() {
        let cfg = SamplerConfig { seed: sampler.seed.wrapping_add(i as u64), ..*sampler };
        generated.push(generate(ck, model, &p.music, p.music.len(), &cfg)?);
    }
    let reference: Vec<MotionSequence> = pairs.iter().map(|p| p.motion.clone()).collect();
    let beats: Vec<Vec<usize>> = pairs.iter().map(|p| p.music.beat_frames()).collect();
    score(&generated, &reference, &beats, &ck.skeleton, sampler.seed)
}
