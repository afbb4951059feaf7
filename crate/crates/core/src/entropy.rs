//! Probability and rate math shared by training and coding.
//!
//! Quantization is additive uniform noise during training and
//! round-half-away-from-zero at inference. Latent symbols are scored
//! by a Gaussian convolved with a unit uniform: p = Phi((d+0.5)/sigma)
//! - Phi((d-0.5)/sigma) with d = value - mean computed first, so the
//! likelihood is exactly invariant to shifting value and mean by the
//! same integer, and the difference of CDFs is evaluated as
//! 0.5*(erf(a) - erf(b)) so symmetric arguments cancel exactly.
//! Hyper-latents use a learned factorized density: a per-channel
//! monotone 3-layer map with a final sigmoid. Probabilities are
//! clamped at p_min = 2^-17, matching the range coder's 16-bit
//! frequency resolution, so estimated rates track coded rates.

use crate::tensor::{Scalar, Tensor};
use rand::Rng;

/// Lower bound applied to every symbol probability.
pub const P_MIN: f64 = 1.0 / (1 << 17) as f64;
/// Smallest admissible Gaussian scale.
pub const SIGMA_FLOOR: f64 = 1e-6;
/// Distortion multiplier: MSE over [0,1] pixels scaled to the 8-bit
/// convention so lambda values match the usual operating points.
pub const DISTORTION_SCALE: f64 = 255.0 * 255.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantizeMode {
    /// Add i.i.d. U(-0.5, 0.5); used during training.
    TrainNoise,
    /// Round half away from zero; used at inference and for coding.
    EvalRound,
}

/// Quantizes a tensor. Noise mode draws from `rng`; the noise enters
/// as an additive constant so gradients pass straight through to `y`.
pub fn quantize<T: Scalar, R: Rng>(y: &Tensor<T>, mode: QuantizeMode, rng: &mut R) -> Tensor<T> {
    match mode {
        QuantizeMode::TrainNoise => {
            let noise: Vec<T> = (0..y.numel())
                .map(|_| T::from_f64(rng.gen_range(-0.5..0.5)))
                .collect();
            quantize_with_noise(y, &Tensor::from_vec(noise, y.shape()))
        }
        QuantizeMode::EvalRound => y.map_unary(|v| v.round_ties_away(), |_| T::ZERO),
    }
}

/// Noise-mode quantization with caller-supplied noise, so tests can
/// freeze the perturbation and finite-difference the rest.
pub fn quantize_with_noise<T: Scalar>(y: &Tensor<T>, noise: &Tensor<T>) -> Tensor<T> {
    assert_eq!(y.shape(), noise.shape(), "quantize noise shape mismatch");
    y.add(noise)
}

/// Per-element Gaussian * uniform likelihood without the p_min clamp;
/// the coder consumes raw probabilities when building its tables.
pub fn gaussian_uniform_raw<T: Scalar>(
    y_hat: &Tensor<T>,
    mu: &Tensor<T>,
    sigma: &Tensor<T>,
) -> Tensor<T> {
    let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
    let half = T::from_f64(0.5);
    let d = y_hat.sub(mu);
    let hi = d.add_scalar(half).div(sigma).mul_scalar(inv_sqrt2).erf();
    let lo = d.add_scalar(-half).div(sigma).mul_scalar(inv_sqrt2).erf();
    hi.sub(&lo).mul_scalar(half)
}

/// Clamped likelihood used by rate estimates and training losses.
pub fn gaussian_uniform_likelihood<T: Scalar>(
    y_hat: &Tensor<T>,
    mu: &Tensor<T>,
    sigma: &Tensor<T>,
) -> Tensor<T> {
    gaussian_uniform_raw(y_hat, mu, sigma).clamp_min(T::from_f64(P_MIN))
}

/// Scalar form of the raw likelihood, shared with the coder's table
/// construction in f64.
pub fn gaussian_uniform_scalar(y_hat: f64, mu: f64, sigma: f64) -> f64 {
    debug_assert!(sigma >= SIGMA_FLOOR);
    let d = y_hat - mu;
    let inv = std::f64::consts::FRAC_1_SQRT_2 / sigma;
    0.5 * (libm::erf((d + 0.5) * inv) - libm::erf((d - 0.5) * inv))
}

/// Standard normal CDF.
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

/// Learned factorized density over hyper-latent channels: each
/// channel owns a monotone map of three width-3 layers (softplus
/// weights, tanh-bounded residual gates) finished by a sigmoid. The
/// same parameters evaluate under f64 for training and f32 for
/// coding.
pub struct FactorizedDensity<T: Scalar> {
    channels: usize,
    pub h1: Tensor<T>, // [C,3,1] pre-softplus
    pub b1: Tensor<T>, // [C,3,1]
    pub a1: Tensor<T>, // [C,3,1] pre-tanh gate
    pub h2: Tensor<T>, // [C,3,3] pre-softplus
    pub b2: Tensor<T>, // [C,3,1]
    pub a2: Tensor<T>, // [C,3,1]
    pub h3: Tensor<T>, // [C,1,3] pre-softplus
    pub b3: Tensor<T>, // [C,1,1]
}

impl<T: Scalar> FactorizedDensity<T> {
    /// Deterministic init: the composed map starts as an exact
    /// logistic CDF with scale 3 (weights chosen so the linear factor
    /// is 1/3, gates and biases zero), wide enough to cover typical
    /// integer latents yet summing to ~1 over [-30, 30].
    pub fn new(channels: usize) -> Self {
        assert!(channels > 0, "FactorizedDensity: zero channels");
        // softplus(w) = 1/3 per entry makes the 3-path composition
        // 9 * (1/3)^3 = 1/3 overall
        let w0 = T::from_f64((f64::exp(1.0 / 3.0) - 1.0).ln());
        let param = |shape: &[usize], v: T| {
            let n: usize = shape.iter().product();
            Tensor::param(vec![v; n], shape)
        };
        FactorizedDensity {
            channels,
            h1: param(&[channels, 3, 1], w0),
            b1: param(&[channels, 3, 1], T::ZERO),
            a1: param(&[channels, 3, 1], T::ZERO),
            h2: param(&[channels, 3, 3], w0),
            b2: param(&[channels, 3, 1], T::ZERO),
            a2: param(&[channels, 3, 1], T::ZERO),
            h3: param(&[channels, 1, 3], w0),
            b3: param(&[channels, 1, 1], T::ZERO),
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn parameters(&self) -> Vec<(String, Tensor<T>)> {
        [
            ("h1", &self.h1),
            ("b1", &self.b1),
            ("a1", &self.a1),
            ("h2", &self.h2),
            ("b2", &self.b2),
            ("a2", &self.a2),
            ("h3", &self.h3),
            ("b3", &self.b3),
        ]
        .into_iter()
        .map(|(n, t)| (format!("density.{n}"), t.clone()))
        .collect()
    }

    /// CDF at x, per channel: x is [C, n], output [C, n], values in
    /// (0, 1), non-decreasing in x by construction.
    pub fn cdf(&self, x: &Tensor<T>) -> Tensor<T> {
        let xs = x.shape().to_vec();
        assert_eq!(xs.len(), 2, "cdf input must be [channels, n], got {xs:?}");
        assert_eq!(xs[0], self.channels, "cdf input channels {} vs {}", xs[0], self.channels);
        let n = xs[1];
        let x3 = x.reshape(&[self.channels, 1, n]);
        let l1 = self.h1.softplus().matmul(&x3).add(&self.b1); // [C,3,n]
        let g1 = l1.add(&self.a1.tanh().mul(&l1.tanh()));
        let l2 = self.h2.softplus().matmul(&g1).add(&self.b2); // [C,3,n]
        let g2 = l2.add(&self.a2.tanh().mul(&l2.tanh()));
        let l3 = self.h3.softplus().matmul(&g2).add(&self.b3); // [C,1,n]
        l3.sigmoid().reshape(&[self.channels, n])
    }

    /// Unclamped integer-bin probability CDF(z+0.5) - CDF(z-0.5).
    pub fn likelihood_raw(&self, z_hat: &Tensor<T>) -> Tensor<T> {
        let half = T::from_f64(0.5);
        self.cdf(&z_hat.add_scalar(half))
            .sub(&self.cdf(&z_hat.add_scalar(-half)))
    }

    /// Clamped likelihood for rate estimates and losses.
    pub fn likelihood(&self, z_hat: &Tensor<T>) -> Tensor<T> {
        self.likelihood_raw(z_hat).clamp_min(T::from_f64(P_MIN))
    }
}

/// Total estimated code length in bits: -sum log2 p.
pub fn rate_bits<T: Scalar>(probabilities: &Tensor<T>) -> Tensor<T> {
    let inv_ln2 = T::from_f64(-1.0 / std::f64::consts::LN_2);
    probabilities.ln().mul_scalar(inv_ln2).sum_all()
}

/// Rate-distortion objective. Rates arrive in bits and come out as
/// bits-per-pixel; distortion is MSE over [0,1] pixels; the total is
/// rate_latents + rate_hyper + lambda * 255^2 * mse.
pub struct RdLoss<T: Scalar> {
    pub rate_latents: Tensor<T>,
    pub rate_hyper: Tensor<T>,
    pub mse: Tensor<T>,
    pub lambda: f64,
    pub total: Tensor<T>,
}

pub fn rd_loss<T: Scalar>(
    x: &Tensor<T>,
    x_hat: &Tensor<T>,
    latent_bits: &Tensor<T>,
    hyper_bits: &Tensor<T>,
    lambda: f64,
    pixel_count: usize,
) -> RdLoss<T> {
    assert!(pixel_count > 0, "rd_loss: pixel_count must be positive");
    assert_eq!(x.shape(), x_hat.shape(), "rd_loss: image shape mismatch");
    let per_pixel = T::from_f64(1.0 / pixel_count as f64);
    let rate_latents = latent_bits.mul_scalar(per_pixel);
    let rate_hyper = hyper_bits.mul_scalar(per_pixel);
    let mse = x.sub(x_hat).square().mean_all();
    let total = rate_latents.add(&rate_hyper).add(
        &mse.mul_scalar(T::from_f64(lambda * DISTORTION_SCALE)),
    );
    RdLoss {
        rate_latents,
        rate_hyper,
        mse,
        lambda,
        total,
    }
}
