//! Generalized divisive normalization and its multiplicative inverse,
//! the nonlinearity pair of the convolutional transforms. Positivity
//! of the effective parameters comes from squaring the stored ones:
//! beta = beta_min + raw_beta^2, gamma = raw_gamma^2.
//!
//! The forward/inverse pair is an exact algebraic inverse only to
//! second order in gamma.x^2: the inverse recomputes the normalizer
//! from its own input. In the synthesis transform each IGDN layer has
//! independent parameters, so nothing relies on exact inversion.

use crate::tensor::{Scalar, Tensor};

pub const BETA_MIN: f64 = 1e-6;

pub struct Gdn<T: Scalar> {
    pub raw_beta: Tensor<T>,
    pub raw_gamma: Tensor<T>,
    channels: usize,
}

impl<T: Scalar> Gdn<T> {
    /// Standard init: beta = 1, gamma = 0.1 on the diagonal.
    pub fn new(channels: usize) -> Self {
        let rb = (1.0 - BETA_MIN).sqrt();
        let mut gamma = vec![T::ZERO; channels * channels];
        let diag = T::from_f64(0.1f64.sqrt());
        for c in 0..channels {
            gamma[c * channels + c] = diag;
        }
        Gdn {
            raw_beta: Tensor::param(vec![T::from_f64(rb); channels], &[channels]),
            raw_gamma: Tensor::param(gamma, &[channels, channels]),
            channels,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    fn normalizer(&self, x: &Tensor<T>) -> Tensor<T> {
        let s = x.shape().to_vec();
        assert_eq!(s.len(), 4, "gdn input must be [B, C, H, W]");
        assert_eq!(s[1], self.channels, "gdn channel mismatch");
        let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
        let x2 = x.square().reshape(&[b, c, hw]);
        let gamma = self.raw_gamma.square();
        let beta = self.raw_beta.square().add_scalar(T::from_f64(BETA_MIN));
        let pooled = gamma.matmul(&x2); // [b, c, hw] via rank-2 lhs broadcast
        pooled.add(&beta.reshape(&[c, 1])).sqrt().reshape(&s)
    }

    /// forward: x / sqrt(beta + gamma x^2); inverse: x * sqrt(...).
    pub fn forward(&self, x: &Tensor<T>, inverse: bool) -> Tensor<T> {
        let norm = self.normalizer(x);
        if inverse {
            x.mul(&norm)
        } else {
            x.div(&norm)
        }
    }

    pub fn parameters(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        out.push((format!("{prefix}.beta_raw"), self.raw_beta.clone()));
        out.push((format!("{prefix}.gamma_raw"), self.raw_gamma.clone()));
    }
}
