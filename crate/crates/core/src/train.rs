//! Optimiser, per-sample loss/gradient and batch reduction for training.
//!
//! The per-sample work is independent, so callers may evaluate a batch in
//! parallel; `reduce` sums in index order, which keeps updates bitwise
//! reproducible regardless of scheduling.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{NormStats, DEFAULT_STRIDE, DEFAULT_WINDOW};
use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::diffusion::{forward_noise, NoiseSchedule, ScheduleKind, DEFAULT_T};
use crate::error::{Error, Result};
use crate::kinematics::{kinematic_loss_on_tape, LossBreakdown, LossWeights, Skeleton};
use crate::nn::ParamStore;
use crate::tape::Tape;
use crate::tempomoe::RoutingSink;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub batch: usize,
    pub cfg_dropout: f64,
    pub loss_weights: LossWeights,
    pub denoiser: DenoiserConfig,
    pub schedule: ScheduleKind,
    pub diffusion_steps: usize,
    pub seed: u64,
    pub window: usize,
    pub stride: usize,
    /// Stop after this many optimiser steps even if epochs remain.
    pub max_steps: Option<usize>,
    /// Save a checkpoint every this many steps; 0 saves only at the end.
    pub checkpoint_every: usize,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            lr: 1e-4,
            warmup_steps: 100,
            batch: 128,
            cfg_dropout: 0.10,
            loss_weights: LossWeights::default(),
            denoiser: DenoiserConfig::default(),
            schedule: ScheduleKind::Cosine,
            diffusion_steps: DEFAULT_T,
            seed: 0,
            window: DEFAULT_WINDOW,
            stride: DEFAULT_STRIDE,
            max_steps: None,
            checkpoint_every: 0,
            log_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        // lr = 0 is allowed: it freezes the parameters
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::OutOfRange(format!("lr must be ≥ 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.cfg_dropout) {
            return Err(Error::OutOfRange(format!("cfg_dropout must be in [0, 1), got {}", self.cfg_dropout)));
        }
        if self.batch == 0 || self.window < 2 || self.stride == 0 || self.diffusion_steps == 0 {
            return Err(Error::Invalid("batch, stride and diffusion_steps must be positive, window ≥ 2".into()));
        }
        self.denoiser.validate()
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.schedule, self.diffusion_steps)
    }
}

/// Linear warmup: `lr·s/warmup` for `s ≤ warmup` (steps count from 1).
pub fn warmup_lr(lr: f64, step: usize, warmup: usize) -> f64 {
    if warmup == 0 || step >= warmup {
        lr
    } else {
        lr * step as f64 / warmup as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Tensor<f32>>,
    v: Vec<Tensor<f32>>,
    t: usize,
}

impl Adam {
    pub fn new(params: &[Tensor<f32>]) -> Self {
        let zeros = |p: &Tensor<f32>| Tensor::zeros(p.shape());
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, m: params.iter().map(zeros).collect(), v: params.iter().map(zeros).collect(), t: 0 }
    }

    pub fn steps(&self) -> usize {
        self.t
    }

    pub fn update(&mut self, params: &mut [Tensor<f32>], grads: &[Tensor<f32>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::Shape { expected: vec![self.m.len()], got: vec![grads.len()] });
        }
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - libm::pow(b1, self.t as f64);
        let c2 = 1.0 - libm::pow(b2, self.t as f64);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            if p.shape() != g.shape() {
                return Err(Error::Shape { expected: p.shape().to_vec(), got: g.shape().to_vec() });
            }
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                let gv = gv as f64;
                let mn = b1 * *mv as f64 + (1.0 - b1) * gv;
                let vn = b2 * *vv as f64 + (1.0 - b2) * gv * gv;
                *mv = mn as f32;
                *vv = vn as f32;
                if lr != 0.0 {
                    let step = lr * (mn / c1) / (libm::sqrt(vn / c2) + self.eps);
                    *pv = (*pv as f64 - step) as f32;
                }
            }
        }
        Ok(())
    }
}

/// One normalised training window.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    /// `[L×d]` motion in normalised units.
    pub motion: Tensor<f32>,
    /// `[L×35]` music features.
    pub music: Tensor<f32>,
    pub fps: f64,
}

/// The random choices made for one sample at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct Draw {
    pub t: usize,
    pub eps: Tensor<f32>,
    pub drop_condition: bool,
}

/// Seeded independently per `(seed, step, slot)` so batch elements can be
/// processed in any order.
pub fn draw(seed: u64, step: usize, slot: usize, rows: usize, cols: usize, t_max: usize, cfg_dropout: f64) -> Draw {
    let key = seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add((step as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9))
        .wrapping_add(slot as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    let t = rng.random_range(1..=t_max);
    let drop_condition = rng.random::<f64>() < cfg_dropout;
    let eps = (0..rows * cols)
        .map(|_| {
            let z: f32 = StandardNormal.sample(&mut rng);
            z
        })
        .collect();
    Draw { t, eps: Tensor::from_parts(vec![rows, cols], eps), drop_condition }
}

/// Everything fixed across a training run that a sample's loss needs.
pub struct LossContext<'a> {
    pub model: &'a Denoiser,
    pub sched: &'a NoiseSchedule,
    pub stats: &'a NormStats,
    pub skel: Arc<Skeleton>,
    pub weights: LossWeights,
}

#[derive(Debug, Clone)]
pub struct SampleGrad {
    pub loss: LossBreakdown,
    pub aux: f64,
    pub grads: Vec<Tensor<f32>>,
}

/// `L_simple + L_kin (+ aux)` for one example, with parameter gradients.
///
/// The kinematic terms are evaluated on denormalised motion so that forward
/// kinematics sees real rotations.
pub fn sample_loss(
    ctx: &LossContext<'_>,
    params: &[Tensor<f32>],
    ex: &Example,
    d: &Draw,
    sink: Option<&mut dyn RoutingSink>,
) -> Result<SampleGrad> {
    let x_t = forward_noise(&ex.motion, d.t, &d.eps, ctx.sched)?;
    let mut tape = Tape::new(params);
    let xv = tape.constant(x_t);
    let music = if d.drop_condition { None } else { Some(tape.constant(ex.music.clone())) };
    let out = ctx.model.forward(&mut tape, xv, d.t as f64, music, sink)?;
    let gt = tape.constant(ex.motion.clone());
    let simple = tape.mse(out.x0, gt);
    let mut total = simple;

    let kin_on = [ctx.weights.lambda_joint, ctx.weights.lambda_vel, ctx.weights.lambda_contact, ctx.weights.lambda_acc]
        .iter()
        .any(|&w| w != 0.0);
    let mut breakdown = LossBreakdown::default();
    if kin_on {
        let dim = ctx.stats.dim();
        let std = tape.constant(Tensor::from_parts(vec![1, dim], ctx.stats.std.iter().map(|&v| v as f32).collect()));
        let mean = tape.constant(Tensor::from_parts(vec![1, dim], ctx.stats.mean.iter().map(|&v| v as f32).collect()));
        let scaled = tape.mul(out.x0, std);
        let raw_pred = tape.add(scaled, mean);
        let raw_gt = ctx.stats.denormalize_frames(&ex.motion)?;
        let terms = kinematic_loss_on_tape(&mut tape, &raw_gt, raw_pred, &ctx.skel, ex.fps, &ctx.weights)?;
        breakdown = terms.read(&tape);
        total = tape.add(total, terms.total);
    }
    let mut aux = 0.0;
    if let Some(a) = out.aux_loss {
        aux = tape.scalar(a) as f64;
        total = tape.add(total, a);
    }
    breakdown.simple = tape.scalar(simple) as f64;
    breakdown.total = tape.scalar(total) as f64;
    if !breakdown.total.is_finite() {
        return Err(Error::Diverged { step: 0 });
    }
    let grads = tape.backward(total).into_dense();
    Ok(SampleGrad { loss: breakdown, aux, grads })
}

/// Averages per-sample losses and gradients in slot order.
pub fn reduce(samples: Vec<SampleGrad>) -> Result<SampleGrad> {
    let n = samples.len();
    let mut it = samples.into_iter();
    let mut acc = it.next().ok_or_else(|| Error::Invalid("empty batch".into()))?;
    for s in it {
        for (a, g) in acc.grads.iter_mut().zip(&s.grads) {
            for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                *x += *y;
            }
        }
        let (l, r) = (&mut acc.loss, &s.loss);
        l.simple += r.simple;
        l.joint += r.joint;
        l.vel += r.vel;
        l.acc += r.acc;
        l.contact += r.contact;
        l.kin_total += r.kin_total;
        l.total += r.total;
        acc.aux += s.aux;
    }
    let inv = 1.0 / n as f64;
    for g in &mut acc.grads {
        for x in g.data_mut() {
            *x = (*x as f64 * inv) as f32;
        }
    }
    let l = &mut acc.loss;
    for v in [&mut l.simple, &mut l.joint, &mut l.vel, &mut l.acc, &mut l.contact, &mut l.kin_total, &mut l.total] {
        *v *= inv;
    }
    acc.aux *= inv;
    Ok(acc)
}

/// Parameters, optimiser state and step counter.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: ParamStore<f32>,
    pub adam: Adam,
    pub step: usize,
}

impl TrainState {
    pub fn new(params: ParamStore<f32>) -> Self {
        let adam = Adam::new(params.tensors());
        Self { params, adam, step: 0 }
    }

    /// Applies averaged gradients with the warmed-up learning rate.
    pub fn apply(&mut self, cfg: &TrainConfig, grads: &[Tensor<f32>]) -> Result<f64> {
        self.step += 1;
        let lr = warmup_lr(cfg.lr, self.step, cfg.warmup_steps);
        self.adam.update(self.params.tensors_mut(), grads, lr)?;
        Ok(lr)
    }

    /// Runs one batch sequentially and updates the parameters.
    pub fn step_sequential(&mut self, cfg: &TrainConfig, ctx: &LossContext<'_>, batch: &[&Example]) -> Result<SampleGrad> {
        let step = self.step + 1;
        let per: Vec<SampleGrad> = batch
            .iter()
            .enumerate()
            .map(|(slot, ex)| {
                let (l, c) = ex.motion.dims();
                let d = draw(cfg.seed, step, slot, l, c, ctx.sched.steps, cfg.cfg_dropout);
                sample_loss(ctx, self.params.tensors(), ex, &d, None)
            })
            .collect::<Result<_>>()
            .map_err(|e| relabel(e, step))?;
        let g = reduce(per)?;
        self.apply(cfg, &g.grads)?;
        Ok(g)
    }
}

/// Attaches the step number to a divergence error.
pub fn relabel(e: Error, step: usize) -> Error {
    match e {
        Error::Diverged { .. } => Error::Diverged { step },
        other => other,
    }
}
