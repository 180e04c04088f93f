//! The training loop: shuffled windows, batched gradients, Adam, logging and
//! periodic checkpoints.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;
use tempomoe_core::dataset::{make_windows, shuffled_order, NormStats, Pair};
use tempomoe_core::denoiser::Denoiser;
use tempomoe_core::kinematics::{LossBreakdown, Skeleton};
use tempomoe_core::train::{draw, reduce, relabel, sample_loss, Example, LossContext, TrainConfig, TrainState};
use tempomoe_core::Error as CoreError;

use crate::checkpoint::Checkpoint;
use crate::dataset::{fit_stats, Dataset, Split};
use crate::error::{AppError, AppResult};

#[derive(Debug, Clone, Serialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
    pub aux: f64,
}

/// What the loop should do after a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

/// Everything a run needs besides the config.
pub struct Corpus {
    pub examples: Vec<Example>,
    pub stats: NormStats,
    pub skeleton: Skeleton,
    pub fps: f64,
}

impl Corpus {
    pub fn from_pairs(pairs: &[Pair], skeleton: Skeleton, window: usize, stride: usize) -> AppResult<Self> {
        let first = pairs.first().ok_or_else(|| AppError::invalid("no training pairs"))?;
        let fps = first.motion.fps;
        let stats = fit_stats(pairs)?;
        let examples = make_windows(pairs, window, stride)?
            .into_iter()
            .map(|w| {
                Ok(Example { motion: stats.normalize_frames(w.motion.frames())?, music: w.music.frames().clone(), fps: w.motion.fps })
            })
            .collect::<AppResult<Vec<_>>>()?;
        Ok(Self { examples, stats, skeleton, fps })
    }

    pub fn from_dataset(ds: &Dataset, cfg: &TrainConfig) -> AppResult<Self> {
        let pairs = ds.pairs(Some(Split::Train))?;
        Self::from_pairs(&pairs, ds.skeleton.clone(), cfg.window, cfg.stride)
    }
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Denoiser,
    pub state: TrainState,
    pub corpus: Corpus,
    pub out: Option<PathBuf>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, corpus: Corpus, out: Option<PathBuf>) -> AppResult<Self> {
        cfg.validate()?;
        if cfg.denoiser.motion_dim != corpus.stats.dim() {
            return Err(AppError::invalid(format!(
                "config motion_dim {} does not match the data ({})",
                cfg.denoiser.motion_dim,
                corpus.stats.dim()
            )));
        }
        let (model, params) = Denoiser::init::<f32>(cfg.denoiser.clone(), cfg.seed)?;
        Ok(Self { cfg, model, state: TrainState::new(params), corpus, out })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.cfg.clone(),
            step: self.state.step,
            fps: self.corpus.fps,
            stats: self.corpus.stats.clone(),
            skeleton: self.corpus.skeleton.clone(),
            params: self.state.params.clone(),
        }
    }

    pub fn total_steps(&self) -> usize {
        let per_epoch = self.corpus.examples.len().div_ceil(self.cfg.batch);
        let n = self.cfg.epochs * per_epoch;
        self.cfg.max_steps.map_or(n, |m| m.min(n))
    }

    /// One optimiser step on the given example indices.
    pub fn step(&mut self, batch: &[usize]) -> AppResult<(f64, tempomoe_core::train::SampleGrad)> {
        let step = self.state.step + 1;
        let sched = self.cfg.schedule()?;
        let ctx = LossContext {
            model: &self.model,
            sched: &sched,
            stats: &self.corpus.stats,
            skel: Arc::new(self.corpus.skeleton.clone()),
            weights: self.cfg.loss_weights,
        };
        let params = self.state.params.tensors();
        let cfg = &self.cfg;
        let examples = &self.corpus.examples;
        let per = batch
            .par_iter()
            .enumerate()
            .map(|(slot, &i)| {
                let ex = &examples[i];
                let (l, c) = ex.motion.dims();
                let d = draw(cfg.seed, step, slot, l, c, sched.steps, cfg.cfg_dropout);
                sample_loss(&ctx, params, ex, &d, None)
            })
            .collect::<Result<Vec<_>, CoreError>>()
            .map_err(|e| AppError::from(relabel(e, step)))?;
        let g = reduce(per)?;
        if !g.loss.total.is_finite() || g.grads.iter().any(|t| !t.is_finite()) {
            return Err(CoreError::Diverged { step }.into());
        }
        let lr = self.state.apply(&self.cfg, &g.grads)?;
        Ok((lr, g))
    }

    /// Runs to completion or until `on_step` asks to stop.
    pub fn run(&mut self, mut on_step: impl FnMut(&Self, &StepLog) -> Control) -> AppResult<Checkpoint> {
        let mut log = match &self.out {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
                let p = dir.join("train_log.jsonl");
                Some((BufWriter::new(File::create(&p).map_err(|e| AppError::io(&p, e))?), p))
            }
            None => None,
        };
        let total = self.total_steps();
        let n = self.corpus.examples.len();
        'outer: for epoch in 0..self.cfg.epochs {
            let order = shuffled_order(n, self.cfg.seed, epoch as u64);
            for chunk in order.chunks(self.cfg.batch) {
                if self.state.step >= total {
                    break 'outer;
                }
                let (lr, g) = self.step(chunk)?;
                let entry = StepLog { step: self.state.step, epoch, lr, loss: g.loss, aux: g.aux };
                if let Some((w, p)) = log.as_mut() {
                    let line = serde_json::to_string(&entry).expect("log entry serialises");
                    writeln!(w, "{line}").map_err(|e| AppError::io(p, e))?;
                }
                if self.cfg.log_every > 0 && self.state.step % self.cfg.log_every == 0 {
                    log::info!(
                        "step {} epoch {} lr {:.2e} total {:.5} simple {:.5} kin {:.5}",
                        entry.step,
                        epoch,
                        lr,
                        entry.loss.total,
                        entry.loss.simple,
                        entry.loss.kin_total
                    );
                }
                if let (Some(dir), k) = (&self.out, self.cfg.checkpoint_every) {
                    if k > 0 && self.state.step % k == 0 {
                        self.checkpoint().save(&dir.join(format!("checkpoint_step{}.json", self.state.step)))?;
                    }
                }
                if on_step(self, &entry) == Control::Stop {
                    break 'outer;
                }
            }
        }
        if let Some((mut w, p)) = log {
            w.flush().map_err(|e| AppError::io(&p, e))?;
        }
        let ck = self.checkpoint();
        if let Some(dir) = &self.out {
            ck.save(&final_checkpoint(dir))?;
        }
        Ok(ck)
    }
}

pub fn final_checkpoint(dir: &Path) -> PathBuf {
    dir.join("checkpoint.json")
}
