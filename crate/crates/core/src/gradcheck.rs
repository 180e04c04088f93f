//! Central finite-difference verification of tape gradients in `f64`.

use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Gradients smaller than this are compared in absolute terms.
pub const REL_ERR_FLOOR: f64 = 1e-5;

/// Assumed rounding error of one loss evaluation, in ulps of the loss.
pub const ROUNDOFF_ULPS: f64 = 16.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradReport {
    pub max_abs_err: f64,
    /// Relative error after discounting the difference quotient's rounding noise.
    pub max_rel_err: f64,
    /// Largest rounding-noise allowance applied to any entry.
    pub fd_noise: f64,
    pub checked_params: usize,
}

/// Compares tape gradients of `loss_fn` with `(f(p+ε) − f(p−ε)) / 2ε`.
///
/// `loss_fn` must build a `[1×1]` loss on the given tape from `tape.param(i)`
/// handles. At most `per_tensor` entries of each parameter tensor are probed,
/// picked with `seed`.
///
/// A difference quotient cannot resolve gradients below
/// `ROUNDOFF_ULPS·ulp(loss)/2ε`; that much disagreement is forgiven before the
/// relative error is formed, so exactly-zero gradients of large losses (e.g.
/// attention key biases) don't read as failures.
pub fn gradient_check<F>(
    params: &[Tensor<f64>],
    epsilon: f64,
    per_tensor: usize,
    seed: u64,
    loss_fn: F,
) -> Result<GradReport>
where
    F: Fn(&mut Tape<'_, f64>) -> Var,
{
    let eval = |ps: &[Tensor<f64>]| {
        let mut tape = Tape::new(ps);
        let out = loss_fn(&mut tape);
        tape.scalar(out)
    };

    let first = eval(params);
    let second = eval(params);
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    let analytic = {
        let mut tape = Tape::new(params);
        let out = loss_fn(&mut tape);
        tape.backward(out).into_dense()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut report = GradReport { max_abs_err: 0.0, max_rel_err: 0.0, fd_noise: 0.0, checked_params: 0 };
    for (pi, p) in params.iter().enumerate() {
        let n = p.len();
        let picks: Vec<usize> =
            if n <= per_tensor { (0..n).collect() } else { sample(&mut rng, n, per_tensor).into_vec() };
        for idx in picks {
            let orig = p.data()[idx];
            work[pi].data_mut()[idx] = orig + epsilon;
            let up = eval(&work);
            work[pi].data_mut()[idx] = orig - epsilon;
            let down = eval(&work);
            work[pi].data_mut()[idx] = orig;

            let numeric = (up - down) / (2.0 * epsilon);
            let exact = analytic[pi].data()[idx];
            let abs = (numeric - exact).abs();
            let noise = ROUNDOFF_ULPS * f64::EPSILON * up.abs().max(down.abs()) / (2.0 * epsilon);
            let rel = (abs - noise).max(0.0) / numeric.abs().max(exact.abs()).max(REL_ERR_FLOOR);
            report.max_abs_err = report.max_abs_err.max(abs);
            report.fd_noise = report.fd_noise.max(noise);
            report.max_rel_err = report.max_rel_err.max(rel);
            report.checked_params += 1;
        }
    }
    Ok(report)
}
