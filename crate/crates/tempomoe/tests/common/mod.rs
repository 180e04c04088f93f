#![allow(dead_code)]

use tempomoe::checkpoint::Checkpoint;
use tempomoe::trainer::{Control, Corpus, Trainer};
use tempomoe_core::dataset::{synth_pair, Pair};
use tempomoe_core::denoiser::DenoiserConfig;
use tempomoe_core::kinematics::Skeleton;
use tempomoe_core::train::TrainConfig;

pub fn pairs(bpms: &[f64], len: usize, skel: &Skeleton) -> Vec<Pair> {
    bpms.iter()
        .enumerate()
        .map(|(i, &bpm)| {
            let (music, motion) = synth_pair(bpm, len, 30.0, skel, i as u64).unwrap();
            Pair { id: format!("p{i}"), music, motion, bpm: Some(bpm) }
        })
        .collect()
}

pub fn tiny_config(denoiser: DenoiserConfig) -> TrainConfig {
    TrainConfig { batch: 2, window: 32, stride: 32, lr: 1e-3, warmup_steps: 1, log_every: 0, denoiser, ..TrainConfig::default() }
}

/// A toy-skeleton checkpoint after a couple of optimiser steps.
pub fn trained(denoiser: DenoiserConfig, steps: usize) -> (Checkpoint, Vec<Pair>) {
    let skel = Skeleton::toy3();
    let ps = pairs(&[90.0, 150.0], 64, &skel);
    let cfg = TrainConfig { max_steps: Some(steps), ..tiny_config(denoiser) };
    let corpus = Corpus::from_pairs(&ps, skel, cfg.window, cfg.stride).unwrap();
    let mut t = Trainer::new(cfg, corpus, None).unwrap();
    let ck = t.run(|_, _| Control::Continue).unwrap();
    (ck, ps)
}

pub fn tiny_denoiser() -> DenoiserConfig {
    DenoiserConfig::tiny(2, 16, 3)
}
