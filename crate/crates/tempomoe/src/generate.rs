//! Drawing motions from a trained checkpoint.

use tempomoe_core::dataset::NormStats;
use tempomoe_core::denoiser::Denoiser;
use tempomoe_core::diffusion::{sample, Denoise, SamplerConfig};
use tempomoe_core::kinematics::{MotionSequence, CONTACT_DIM};
use tempomoe_core::music::MusicFeatures;
use tempomoe_core::{Result, Tensor};

use crate::checkpoint::Checkpoint;
use crate::error::{AppError, AppResult};

/// A denoiser bound to its weights and one music clip.
pub struct Conditioned<'a> {
    pub model: &'a Denoiser,
    pub params: &'a [Tensor<f32>],
    pub music: Tensor<f32>,
}

impl Denoise for Conditioned<'_> {
    fn denoise(&self, x_t: &Tensor<f64>, t: f64, conditional: bool) -> Result<Tensor<f64>> {
        let music = conditional.then_some(&self.music);
        let out = self.model.predict(self.params, &x_t.cast::<f32>(), t, music, None)?;
        Ok(out.cast())
    }
}

/// Normalised-space sample → motion with binary contacts.
pub fn to_motion(x: &Tensor<f64>, stats: &NormStats, fps: f64, joints: usize) -> AppResult<MotionSequence> {
    let mut raw = stats.denormalize_frames(x)?.cast::<f32>();
    for t in 0..raw.rows() {
        for c in 0..CONTACT_DIM {
            let v = raw.at(t, c);
            raw.set(t, c, if v >= 0.5 { 1.0 } else { 0.0 });
        }
    }
    Ok(MotionSequence::new(raw, fps, joints)?)
}

/// Samples `frames` frames conditioned on the first `frames` of `music`.
pub fn generate(ck: &Checkpoint, model: &Denoiser, music: &MusicFeatures, frames: usize, cfg: &SamplerConfig) -> AppResult<MotionSequence> {
    if frames < 2 {
        return Err(AppError::invalid("need at least 2 frames"));
    }
    if frames > music.len() {
        return Err(AppError::invalid(format!("requested {frames} frames but the music has {}", music.len())));
    }
    if (music.fps - ck.fps).abs() > 1e-3 {
        return Err(AppError::invalid(format!("music fps {} differs from the model's {}", music.fps, ck.fps)));
    }
    let cond = Conditioned { model, params: ck.params.tensors(), music: music.window(0, frames).frames().clone() };
    let sched = ck.config.schedule()?;
    let x = sample(&cond, frames, ck.config.denoiser.motion_dim, &sched, cfg)?;
    if !x.is_finite() {
        return Err(AppError::runtime("sampler produced non-finite values"));
    }
    to_motion(&x, &ck.stats, ck.fps, ck.skeleton.joints)
}
