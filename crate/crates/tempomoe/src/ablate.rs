//! Runs one training step for every ablation variant.

use serde::Serialize;
use tempomoe_core::ablation::{ablation_expand, full_sweep, Variant};
use tempomoe_core::dataset::{synth_pair, Pair};
use tempomoe_core::denoiser::DenoiserConfig;
use tempomoe_core::kinematics::Skeleton;
use tempomoe_core::train::TrainConfig;

use crate::error::AppResult;
use crate::trainer::{Corpus, Trainer};

#[derive(Debug, Clone, Serialize)]
pub struct AblationResult {
    pub name: String,
    pub params: usize,
    pub ok: bool,
    pub loss: Option<f64>,
    pub error: Option<String>,
}

/// A small base config for ablation runs without `--config`.
pub fn desk_config(joints: usize) -> TrainConfig {
    TrainConfig {
        batch: 2,
        window: 64,
        stride: 64,
        lr: 1e-4,
        warmup_steps: 10,
        denoiser: DenoiserConfig::tiny(1, 32, joints),
        ..TrainConfig::default()
    }
}

/// Two short synthetic pairs on the toy skeleton.
pub fn desk_pairs(seed: u64) -> AppResult<(Vec<Pair>, Skeleton)> {
    let skel = Skeleton::toy3();
    let pairs = [90.0, 150.0]
        .iter()
        .enumerate()
        .map(|(i, &bpm)| {
            let (music, motion) = synth_pair(bpm, 64, 30.0, &skel, seed.wrapping_add(i as u64))?;
            Ok(Pair { id: format!("desk{i}"), music, motion, bpm: Some(bpm) })
        })
        .collect::<AppResult<Vec<_>>>()?;
    Ok((pairs, skel))
}

pub fn variants(base: &TrainConfig, axis: Option<&str>) -> AppResult<Vec<Variant>> {
    Ok(match axis {
        Some(a) => ablation_expand(&base.denoiser, a)?,
        None => full_sweep(&base.denoiser)?,
    })
}

pub fn run_variant(base: &TrainConfig, v: &Variant, pairs: &[Pair], skel: &Skeleton) -> AblationResult {
    let attempt = || -> AppResult<(usize, f64)> {
        let cfg = TrainConfig { denoiser: v.config.clone(), ..base.clone() };
        let corpus = Corpus::from_pairs(pairs, skel.clone(), cfg.window, cfg.stride)?;
        let mut t = Trainer::new(cfg, corpus, None)?;
        let n = t.state.params.count();
        let batch: Vec<usize> = (0..t.corpus.examples.len().min(t.cfg.batch)).collect();
        let (_, g) = t.step(&batch)?;
        Ok((n, g.loss.total))
    };
    match attempt() {
        Ok((params, loss)) => AblationResult { name: v.name.clone(), params, ok: true, loss: Some(loss), error: None },
        Err(e) => AblationResult { name: v.name.clone(), params: 0, ok: false, loss: None, error: Some(e.to_string()) },
    }
}
