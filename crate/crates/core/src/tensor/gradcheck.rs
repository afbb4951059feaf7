//! Finite-difference gradient checking.
//!
//! The reverse-mode engine is validated against central differences
//! in f64: perturb one parameter element at a time, rebuild the loss,
//! and compare (f(x+h) - f(x-h)) / 2h with the analytic gradient.
//! Relative error uses a floored denominator so near-zero gradients
//! do not explode the ratio.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Tensor;

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Acceptance threshold on the relative error.
pub const FD_TOL: f64 = 1e-4;

fn relative_error(analytic: f64, fd: f64) -> f64 {
    let denom = (analytic.abs() + fd.abs()).max(1e-6);
    (analytic - fd).abs() / denom
}

/// Checks every element of every parameter. `loss_fn` must rebuild
/// the scalar loss from the same parameter handles on each call.
/// Returns the maximum relative error observed.
pub fn grad_check(loss_fn: impl Fn() -> Tensor<f64>, params: &[Tensor<f64>], step: f64) -> f64 {
    grad_check_inner(loss_fn, params, step, None)
}

/// Like [`grad_check`] but probes at most `max_per_param` elements of
/// each parameter, chosen by the seeded RNG. Keeps large-tensor
/// checks affordable while still covering every parameter.
pub fn grad_check_seeded(
    loss_fn: impl Fn() -> Tensor<f64>,
    params: &[Tensor<f64>],
    step: f64,
    max_per_param: usize,
    seed: u64,
) -> f64 {
    grad_check_inner(loss_fn, params, step, Some((max_per_param, seed)))
}

fn grad_check_inner(
    loss_fn: impl Fn() -> Tensor<f64>,
    params: &[Tensor<f64>],
    step: f64,
    sample: Option<(usize, u64)>,
) -> f64 {
    for p in params {
        assert!(p.requires_grad_flag(), "grad_check: parameter does not require grad");
        p.zero_grad();
    }
    let loss = loss_fn();
    loss.backward();
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| {
            p.grad()
                .unwrap_or_else(|| panic!("grad_check: no gradient reached a parameter"))
        })
        .collect();

    let mut rng = sample.map(|(_, seed)| ChaCha8Rng::seed_from_u64(seed));
    let mut worst = 0.0f64;
    for (pi, p) in params.iter().enumerate() {
        let n = p.numel();
        let mut idxs: Vec<usize> = (0..n).collect();
        if let (Some((cap, _)), Some(r)) = (sample, rng.as_mut()) {
            if n > cap {
                idxs.shuffle(r);
                idxs.truncate(cap);
            }
        }
        let base = p.to_vec();
        for &i in &idxs {
            let mut probe = base.clone();
            probe[i] = base[i] + step;
            p.set_data(&probe);
            let up = loss_fn().item();
            probe[i] = base[i] - step;
            p.set_data(&probe);
            let down = loss_fn().item();
            p.set_data(&base);
            let fd = (up - down) / (2.0 * step);
            let err = relative_error(analytic[pi][i], fd);
            if err > worst {
                worst = err;
            }
        }
    }
    worst
}
