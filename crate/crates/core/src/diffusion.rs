//! Variance-preserving noise schedules, the clean-sample loss, classifier-free
//! guidance and the two samplers.

use alloc::format;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const DEFAULT_T: usize = 1000;
const COSINE_OFFSET: f64 = 0.008;
/// End of the cosine curve actually used; the remainder sends `log(α/σ)` to −∞.
const COSINE_T_MAX: f64 = 0.9946;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    #[default]
    Cosine,
    Linear,
}

/// `x_t = α_t x_0 + σ_t ε` with `α_t² + σ_t² = 1`, for integer `t ∈ [0, T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    pub steps: usize,
    pub alpha: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(kind: ScheduleKind, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::OutOfRange(format!("schedule needs T ≥ 1, got {steps}")));
        }
        let n = steps as f64;
        let alpha_bar: Vec<f64> = match kind {
            ScheduleKind::Cosine => {
                let f = |u: f64| {
                    let c = libm::cos((u + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * core::f64::consts::FRAC_PI_2);
                    c * c
                };
                (1..=steps).map(|t| f(t as f64 / n * COSINE_T_MAX) / f(0.0)).collect()
            }
            ScheduleKind::Linear => {
                let mut acc = 1.0;
                (0..steps)
                    .map(|i| {
                        let u = if steps == 1 { 1.0 } else { i as f64 / (n - 1.0) };
                        acc *= 1.0 - (1e-4 + u * (0.02 - 1e-4));
                        acc
                    })
                    .collect()
            }
        };
        let mut alpha = Vec::with_capacity(steps + 1);
        let mut sigma = Vec::with_capacity(steps + 1);
        alpha.push(1.0);
        sigma.push(0.0);
        for ab in alpha_bar {
            alpha.push(libm::sqrt(ab));
            sigma.push(libm::sqrt(1.0 - ab));
        }
        Ok(Self { kind, steps, alpha, sigma })
    }

    pub fn cosine() -> Self {
        Self::new(ScheduleKind::Cosine, DEFAULT_T).expect("default schedule")
    }

    /// `log(α_t/σ_t)`; `+∞` at `t = 0`.
    pub fn lambda(&self, t: usize) -> f64 {
        libm::log(self.alpha[t]) - libm::log(self.sigma[t])
    }

    /// `(α, σ)` at a fractional timestep. Between integer steps `λ` is
    /// interpolated linearly; below `t = 1` the signal power `α²` is.
    pub fn alpha_sigma_at(&self, t: f64) -> Result<(f64, f64)> {
        if !(0.0..=self.steps as f64).contains(&t) {
            return Err(Error::OutOfRange(format!("timestep {t} outside [0, {}]", self.steps)));
        }
        let lo = libm::floor(t) as usize;
        let frac = t - lo as f64;
        if frac == 0.0 {
            return Ok((self.alpha[lo], self.sigma[lo]));
        }
        if lo == 0 {
            let a2 = 1.0 + frac * (self.alpha[1] * self.alpha[1] - 1.0);
            return Ok((libm::sqrt(a2), libm::sqrt(1.0 - a2)));
        }
        let lam = self.lambda(lo) + frac * (self.lambda(lo + 1) - self.lambda(lo));
        Ok(alpha_sigma_from_lambda(lam))
    }

    /// Fractional timestep in `[1, T]` whose interpolated `λ` equals `lam`.
    pub fn t_of_lambda(&self, lam: f64) -> f64 {
        let (hi, lo) = (self.lambda(1), self.lambda(self.steps));
        if lam >= hi {
            return 1.0;
        }
        if lam <= lo {
            return self.steps as f64;
        }
        // λ decreases with t: find the last i with λ_i ≥ lam.
        let (mut a, mut b) = (1usize, self.steps);
        while b - a > 1 {
            let m = (a + b) / 2;
            if self.lambda(m) >= lam {
                a = m;
            } else {
                b = m;
            }
        }
        let (la, lb) = (self.lambda(a), self.lambda(b));
        a as f64 + (la - lam) / (la - lb)
    }
}

pub fn alpha_sigma_from_lambda(lam: f64) -> (f64, f64) {
    // α² = sigmoid(2λ), σ² = sigmoid(−2λ)
    let a2 = 1.0 / (1.0 + libm::exp(-2.0 * lam));
    let s2 = 1.0 / (1.0 + libm::exp(2.0 * lam));
    (libm::sqrt(a2), libm::sqrt(s2))
}

pub fn forward_noise<S: Real>(x0: &Tensor<S>, t: usize, eps: &Tensor<S>, sched: &NoiseSchedule) -> Result<Tensor<S>> {
    if t > sched.steps {
        return Err(Error::OutOfRange(format!("timestep {t} outside [0, {}]", sched.steps)));
    }
    if x0.shape() != eps.shape() {
        return Err(Error::Shape { expected: x0.shape().to_vec(), got: eps.shape().to_vec() });
    }
    let (a, s) = (S::of(sched.alpha[t]), S::of(sched.sigma[t]));
    Ok(x0.zip_map(eps, |x, e| a * x + s * e))
}

/// Mean squared error over every entry.
pub fn loss_simple<S: Real>(x0: &Tensor<S>, pred: &Tensor<S>) -> Result<f64> {
    if x0.shape() != pred.shape() {
        return Err(Error::Shape { expected: x0.shape().to_vec(), got: pred.shape().to_vec() });
    }
    let n = x0.len().max(1) as f64;
    Ok(x0.data().iter().zip(pred.data()).map(|(&a, &b)| (a - b).f64().powi(2)).sum::<f64>() / n)
}

/// A clean-sample predictor with conditional and null-conditioned passes.
pub trait Denoise {
    fn denoise(&self, x_t: &Tensor<f64>, t: f64, conditional: bool) -> Result<Tensor<f64>>;
}

/// Guided prediction `x̂_null + w·(x̂_c − x̂_null)`.
pub fn cfg_predict<M: Denoise + ?Sized>(model: &M, x_t: &Tensor<f64>, t: f64, w: f64) -> Result<Tensor<f64>> {
    if w == 1.0 {
        return model.denoise(x_t, t, true);
    }
    let u = model.denoise(x_t, t, false)?;
    if w == 0.0 {
        return Ok(u);
    }
    let c = model.denoise(x_t, t, true)?;
    Ok(u.zip_map(&c, |u, c| u + w * (c - u)))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    Ancestral,
    #[default]
    #[serde(rename = "dpmpp_2m")]
    DpmPp2M,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub solver: Solver,
    pub steps: usize,
    pub guidance: f64,
    pub seed: u64,
    /// Ancestral noise level: 1 is the DDPM posterior, 0 injects no noise.
    pub eta: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { solver: Solver::DpmPp2M, steps: 10, guidance: 2.5, seed: 0, eta: 1.0 }
    }
}

pub fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(&[rows, cols], data).expect("gaussian shape")
}

/// Draws `x_T` from the seed and integrates back to `x_0`.
pub fn sample<M: Denoise + ?Sized>(
    model: &M,
    rows: usize,
    cols: usize,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
) -> Result<Tensor<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let x_t = gaussian(rows, cols, &mut rng);
    sample_from(model, x_t, sched, cfg, &mut rng)
}

pub fn sample_from<M: Denoise + ?Sized>(
    model: &M,
    x_t: Tensor<f64>,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<f64>> {
    if cfg.steps == 0 || cfg.steps > sched.steps {
        return Err(Error::OutOfRange(format!("sampler steps {} outside [1, {}]", cfg.steps, sched.steps)));
    }
    if cfg.guidance < 0.0 {
        return Err(Error::OutOfRange(format!("guidance scale {} must be ≥ 0", cfg.guidance)));
    }
    match cfg.solver {
        Solver::Ancestral => ancestral(model, x_t, sched, cfg, rng),
        Solver::DpmPp2M => dpmpp_2m(model, x_t, sched, cfg),
    }
}

/// Evenly strided integer timesteps `T = τ_0 > … > τ_steps = 0`.
pub fn strided_timesteps(total: usize, steps: usize) -> Vec<usize> {
    (0..=steps).map(|i| ((steps - i) * total + steps / 2) / steps).collect()
}

fn ancestral<M: Denoise + ?Sized>(
    model: &M,
    mut x: Tensor<f64>,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<f64>> {
    let ts = strided_timesteps(sched.steps, cfg.steps);
    for pair in ts.windows(2) {
        let (t, s) = (pair[0], pair[1]);
        let x0 = cfg_predict(model, &x, t as f64, cfg.guidance)?;
        let (a_t, s_t) = (sched.alpha[t], sched.sigma[t]);
        let (a_s, s_s) = (sched.alpha[s], sched.sigma[s]);
        if s == 0 {
            x = x0.map(|v| a_s * v);
            break;
        }
        // σ̃² = (σ_s²/σ_t²)(1 − α_t²/α_s²), scaled by η².
        let ratio = a_t / a_s;
        let var = (s_s * s_s / (s_t * s_t)) * (1.0 - ratio * ratio);
        let noise_sd = cfg.eta * libm::sqrt(var.max(0.0));
        let dir = libm::sqrt((s_s * s_s - noise_sd * noise_sd).max(0.0));
        let eps = x.zip_map(&x0, |xt, x0| (xt - a_t * x0) / s_t);
        let mut next = x0.zip_map(&eps, |x0, e| a_s * x0 + dir * e);
        if noise_sd > 0.0 {
            for v in next.data_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *v += noise_sd * z;
            }
        }
        x = next;
    }
    Ok(x)
}

/// Second-order multistep solver in data-prediction form. Times are uniform
/// in log-SNR from `λ_T` to `λ_1`, followed by a first-order jump to `t = 0`;
/// `steps` model evaluations in total.
fn dpmpp_2m<M: Denoise + ?Sized>(
    model: &M,
    mut x: Tensor<f64>,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
) -> Result<Tensor<f64>> {
    let (lam_start, lam_end) = (sched.lambda(sched.steps), sched.lambda(1));
    let n = cfg.steps;
    let lambdas: Vec<f64> = if n == 1 {
        alloc::vec![lam_start]
    } else {
        (0..n).map(|i| lam_start + (lam_end - lam_start) * i as f64 / (n - 1) as f64).collect()
    };
    let times: Vec<f64> = lambdas
        .iter()
        .enumerate()
        .map(|(i, &l)| match i {
            0 => sched.steps as f64,
            _ if i == n - 1 => 1.0,
            _ => sched.t_of_lambda(l),
        })
        .collect();

    let mut prev: Option<(Tensor<f64>, f64)> = None;
    for i in 0..n {
        let x0 = cfg_predict(model, &x, times[i], cfg.guidance)?;
        if i == n - 1 {
            return Ok(x0);
        }
        let (a_next, s_next) = sched.alpha_sigma_at(times[i + 1])?;
        let (_, s_cur) = sched.alpha_sigma_at(times[i])?;
        let h = lambdas[i + 1] - lambdas[i];
        let d = match &prev {
            Some((x0_prev, h_prev)) => {
                let r = h_prev / h;
                let c = 1.0 / (2.0 * r);
                x0.zip_map(x0_prev, |a, b| (1.0 + c) * a - c * b)
            }
            None => x0.clone(),
        };
        let em1 = libm::expm1(-h);
        x = x.zip_map(&d, |xv, dv| (s_next / s_cur) * xv - a_next * em1 * dv);
        prev = Some((x0, h));
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use rand::Rng;

    #[test]
    fn schedule_invariants() {
        for kind in [ScheduleKind::Cosine, ScheduleKind::Linear] {
            let s = NoiseSchedule::new(kind, DEFAULT_T).unwrap();
            assert_eq!(s.alpha.len(), DEFAULT_T + 1);
            for t in 0..=DEFAULT_T {
                assert!((s.alpha[t].powi(2) + s.sigma[t].powi(2) - 1.0).abs() < 1e-12);
                if t > 0 {
                    assert!(s.sigma[t] >= s.sigma[t - 1]);
                }
            }
            assert_eq!(s.sigma[0], 0.0);
            assert!(s.sigma[DEFAULT_T] > 0.99, "{kind:?}");
        }
    }

    #[test]
    fn fractional_timesteps_interpolate() {
        let s = NoiseSchedule::cosine();
        let (a, sg) = s.alpha_sigma_at(500.0).unwrap();
        assert_eq!((a, sg), (s.alpha[500], s.sigma[500]));
        let (a, sg) = s.alpha_sigma_at(500.5).unwrap();
        assert!(a < s.alpha[500] && a > s.alpha[501]);
        assert!((a * a + sg * sg - 1.0).abs() < 1e-12);
        let t = s.t_of_lambda(s.lambda(321));
        assert!((t - 321.0).abs() < 1e-9);
        assert!(s.alpha_sigma_at(0.5).unwrap().0 < 1.0);
        assert!(s.alpha_sigma_at(1000.5).is_err());
    }

    #[test]
    fn forward_noise_endpoints() {
        let s = NoiseSchedule::cosine();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x0 = gaussian(4, 5, &mut rng);
        let eps = gaussian(4, 5, &mut rng);
        assert_eq!(forward_noise(&x0, 0, &eps, &s).unwrap(), x0);
        let xt = forward_noise(&x0, DEFAULT_T, &eps, &s).unwrap();
        assert!(xt.max_abs_diff(&eps) < 0.05);
        assert!(forward_noise(&x0, DEFAULT_T + 1, &eps, &s).is_err());
    }

    #[test]
    fn forward_noise_preserves_variance() {
        let s = NoiseSchedule::cosine();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0 = gaussian(10_000, 1, &mut rng);
        let eps = gaussian(10_000, 1, &mut rng);
        let xt = forward_noise(&x0, 500, &eps, &s).unwrap();
        let m = xt.data().iter().sum::<f64>() / 1e4;
        let v = xt.data().iter().map(|x| (x - m).powi(2)).sum::<f64>() / 1e4;
        assert!((v - 1.0).abs() < 0.03, "{v}");
    }

    #[test]
    fn loss_simple_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = gaussian(3, 4, &mut rng);
        assert_eq!(loss_simple(&a, &a).unwrap(), 0.0);
        assert!((loss_simple(&a, &a.map(|x| x + 1.0)).unwrap() - 1.0).abs() < 1e-12);
        let b = gaussian(3, 4, &mut rng);
        let mut want = 0.0;
        for i in 0..3 {
            for j in 0..4 {
                want += (a.at(i, j) - b.at(i, j)).powi(2);
            }
        }
        assert!((loss_simple(&a, &b).unwrap() - want / 12.0).abs() < 1e-12);
        assert!(loss_simple(&a, &gaussian(4, 3, &mut rng)).is_err());
    }

    /// Affine toy model whose conditional and null passes differ.
    struct Affine;
    impl Denoise for Affine {
        fn denoise(&self, x: &Tensor<f64>, t: f64, c: bool) -> Result<Tensor<f64>> {
            let k = if c { 0.3 } else { -0.7 };
            Ok(x.map(|v| k * v + t * 1e-3))
        }
    }

    #[test]
    fn guidance_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = gaussian(3, 3, &mut rng);
        let c = Affine.denoise(&x, 7.0, true).unwrap();
        let u = Affine.denoise(&x, 7.0, false).unwrap();
        assert_eq!(cfg_predict(&Affine, &x, 7.0, 1.0).unwrap(), c);
        assert_eq!(cfg_predict(&Affine, &x, 7.0, 0.0).unwrap(), u);
        let g = cfg_predict(&Affine, &x, 7.0, 2.5).unwrap();
        let manual = u.zip_map(&c, |u, c| u + 2.5 * (c - u));
        assert!(g.max_abs_diff(&manual) < 1e-15);
    }

    /// Returns a fixed clean sample regardless of input.
    struct Oracle(Tensor<f64>);
    impl Denoise for Oracle {
        fn denoise(&self, _: &Tensor<f64>, _: f64, _: bool) -> Result<Tensor<f64>> {
            Ok(self.0.clone())
        }
    }

    #[test]
    fn exact_denoiser_is_a_fixed_point() {
        let s = NoiseSchedule::cosine();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x0 = gaussian(6, 3, &mut rng);
        for eta in [0.0, 1.0] {
            for steps in [10, 50, 1000] {
                let cfg = SamplerConfig { solver: Solver::Ancestral, steps, guidance: 1.0, seed: 9, eta };
                let out = sample(&Oracle(x0.clone()), 6, 3, &s, &cfg).unwrap();
                assert_eq!(out, x0);
            }
        }
        let cfg = SamplerConfig { guidance: 1.0, ..SamplerConfig::default() };
        assert!(sample(&Oracle(x0.clone()), 6, 3, &s, &cfg).unwrap().max_abs_diff(&x0) < 1e-12);
    }

    struct Gauss {
        mu: f64,
        s: f64,
        sched: NoiseSchedule,
        calls: core::cell::Cell<usize>,
    }
    impl Denoise for Gauss {
        fn denoise(&self, x: &Tensor<f64>, t: f64, _: bool) -> Result<Tensor<f64>> {
            self.calls.set(self.calls.get() + 1);
            let (a, sg) = self.sched.alpha_sigma_at(t)?;
            let s2 = self.s * self.s;
            Ok(x.map(|v| (a * s2 * v + sg * sg * self.mu) / (a * a * s2 + sg * sg)))
        }
    }

    fn gauss() -> Gauss {
        Gauss { mu: 2.0, s: 0.5, sched: NoiseSchedule::cosine(), calls: core::cell::Cell::new(0) }
    }

    fn moments(x: &Tensor<f64>) -> (f64, f64) {
        let n = x.len() as f64;
        let m = x.data().iter().sum::<f64>() / n;
        (m, x.data().iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0))
    }

    /// Gain of the sampler map `x_T ↦ x_0` (linear for this oracle).
    fn gain(g: &Gauss, solver: Solver, steps: usize) -> f64 {
        let cfg = SamplerConfig { solver, steps, guidance: 1.0, seed: 0, eta: 0.0 };
        let x = Tensor::matrix(2, 1, vec![-1.0, 1.0]).unwrap();
        let y = sample_from(g, x, &g.sched, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        (y.at(1, 0) - y.at(0, 0)) / 2.0
    }

    fn exact_gain(g: &Gauss) -> f64 {
        let (a, sg) = (g.sched.alpha[DEFAULT_T], g.sched.sigma[DEFAULT_T]);
        g.s / libm::sqrt(a * a * g.s * g.s + sg * sg)
    }

    #[test]
    fn dpmpp_ten_steps_mean_and_call_count() {
        let g = gauss();
        let cfg = SamplerConfig { guidance: 1.0, seed: 5, ..SamplerConfig::default() };
        let x = sample(&g, 4096, 1, &g.sched, &cfg).unwrap();
        assert_eq!(g.calls.get(), 10);
        let (m, _) = moments(&x);
        assert!((m - 2.0).abs() / 2.0 < 0.02, "mean {m}");
    }

    #[test]
    fn dpmpp_converges_at_second_order() {
        let g = gauss();
        let exact = exact_gain(&g);
        let errs: Vec<f64> = [10, 20, 40, 80].iter().map(|&n| (gain(&g, Solver::DpmPp2M, n) - exact).abs()).collect();
        for w in errs.windows(2) {
            assert!(w[0] / w[1] > 2.4, "{errs:?}");
        }
        // variance bias is (gain ratio)² − 1
        let bias = |n| (gain(&g, Solver::DpmPp2M, n) / exact).powi(2) - 1.0;
        assert!(bias(40) < 0.01);
        let cfg = SamplerConfig { guidance: 1.0, seed: 5, steps: 40, ..SamplerConfig::default() };
        let (m, v) = moments(&sample(&g, 4096, 1, &g.sched, &cfg).unwrap());
        assert!((m - 2.0).abs() / 2.0 < 0.02 && (v - 0.25).abs() / 0.25 < 0.05, "{m} {v}");
    }

    #[test]
    fn dense_solvers_agree_with_exact_flow() {
        let g = gauss();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let xt = gaussian(64, 1, &mut rng);
        let (a, sg) = (g.sched.alpha[DEFAULT_T], g.sched.sigma[DEFAULT_T]);
        let exact = xt.map(|v| g.mu + g.s * (v - a * g.mu) / libm::sqrt(a * a * g.s * g.s + sg * sg));
        let run = |solver, eta| {
            let cfg = SamplerConfig { solver, steps: DEFAULT_T, guidance: 1.0, seed: 0, eta };
            sample_from(&g, xt.clone(), &g.sched, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
        };
        let ddim = run(Solver::Ancestral, 0.0);
        let dpm = run(Solver::DpmPp2M, 0.0);
        let scale = exact.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(ddim.max_abs_diff(&dpm) / scale < 1e-3, "{}", ddim.max_abs_diff(&dpm));
        assert!(dpm.max_abs_diff(&exact) < 1e-3);
        // first-order global error of the integer-grid sampler
        assert!(ddim.max_abs_diff(&exact) < 5e-3);
    }

    #[test]
    fn ancestral_matches_gaussian_moments() {
        let g = gauss();
        let cfg = SamplerConfig { solver: Solver::Ancestral, steps: 100, guidance: 1.0, seed: 7, eta: 1.0 };
        let (m, v) = moments(&sample(&g, 4096, 1, &g.sched, &cfg).unwrap());
        assert!((m - 2.0).abs() / 2.0 < 0.02 && (v - 0.25).abs() / 0.25 < 0.08, "{m} {v}");
    }

    #[test]
    fn sampling_is_deterministic() {
        let g = gauss();
        for solver in [Solver::Ancestral, Solver::DpmPp2M] {
            let cfg = SamplerConfig { solver, steps: 20, guidance: 1.0, seed: 8, eta: 1.0 };
            let a = sample(&g, 8, 3, &g.sched, &cfg).unwrap();
            let b = sample(&g, 8, 3, &g.sched, &cfg).unwrap();
            assert_eq!(a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
    }

    #[test]
    fn rejects_bad_sampler_config() {
        let g = gauss();
        let too_many = SamplerConfig { steps: DEFAULT_T + 1, ..SamplerConfig::default() };
        assert!(sample(&g, 2, 2, &g.sched, &too_many).is_err());
        let negative = SamplerConfig { guidance: -1.0, ..SamplerConfig::default() };
        assert!(sample(&g, 2, 2, &g.sched, &negative).is_err());
    }

    #[test]
    fn strided_grid_endpoints() {
        assert_eq!(strided_timesteps(1000, 4), vec![1000, 750, 500, 250, 0]);
        assert_eq!(strided_timesteps(10, 10), (0..=10).rev().collect::<Vec<_>>());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let steps = rng.random_range(1..1000);
        let g = strided_timesteps(1000, steps);
        assert!(g.windows(2).all(|w| w[0] > w[1]));
    }
}
