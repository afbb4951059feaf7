//! Small parameterized layers shared by the transforms and the
//! entropy model. Weights draw from a truncated normal (resampled
//! until within two standard deviations); biases start at zero.

use crate::tensor::{Scalar, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Truncated-normal sample vector: N(0, std) rejected outside 2 std.
pub fn trunc_normal<T: Scalar>(rng: &mut ChaCha8Rng, std: f64, count: usize) -> Vec<T> {
    let dist = Normal::new(0.0f64, std).expect("std must be finite");
    (0..count)
        .map(|_| {
            loop {
                let v = dist.sample(rng);
                if v.abs() <= 2.0 * std {
                    return T::from_f64(v);
                }
            }
        })
        .collect()
}

/// Uniform sample in [lo, hi), for parameters that need scale-aware
/// spread rather than the global init.
pub fn uniform<T: Scalar>(rng: &mut ChaCha8Rng, lo: f64, hi: f64, count: usize) -> Vec<T> {
    (0..count).map(|_| T::from_f64(rng.gen_range(lo..hi))).collect()
}

/// y = x W + b with W stored [in, out].
pub struct Linear<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(rng: &mut ChaCha8Rng, std: f64, d_in: usize, d_out: usize) -> Self {
        Linear {
            weight: Tensor::param(trunc_normal(rng, std, d_in * d_out), &[d_in, d_out]),
            bias: Tensor::param(vec![T::ZERO; d_out], &[d_out]),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        x.matmul(&self.weight).add(&self.bias)
    }

    pub fn parameters(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

/// Strided 2-D convolution over [B, C, H, W].
pub struct Conv2d<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(
        rng: &mut ChaCha8Rng,
        std: f64,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Self {
        let per_group = c_in / groups;
        Conv2d {
            weight: Tensor::param(
                trunc_normal(rng, std, c_out * per_group * kernel * kernel),
                &[c_out, per_group, kernel, kernel],
            ),
            bias: Tensor::param(vec![T::ZERO; c_out], &[c_out]),
            stride,
            pad,
            groups,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        x.conv2d(&self.weight, &self.bias, self.stride, self.pad, self.groups)
    }

    pub fn parameters(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

/// Transposed 2-D convolution (stride-2 upsampling in the synthesis
/// transform). Weight layout [C_in, C_out, kh, kw].
pub struct ConvT2d<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub pad: usize,
    pub out_pad: usize,
}

impl<T: Scalar> ConvT2d<T> {
    pub fn new(
        rng: &mut ChaCha8Rng,
        std: f64,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Self {
        ConvT2d {
            weight: Tensor::param(
                trunc_normal(rng, std, c_in * c_out * kernel * kernel),
                &[c_in, c_out, kernel, kernel],
            ),
            bias: Tensor::param(vec![T::ZERO; c_out], &[c_out]),
            stride,
            pad,
            out_pad,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        x.conv_transpose2d(&self.weight, &self.bias, self.stride, self.pad, self.out_pad)
    }

    pub fn parameters(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn trunc_normal_respects_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let v: Vec<f64> = trunc_normal(&mut rng, 0.02, 10_000);
        assert!(v.iter().all(|x| x.abs() <= 0.04));
        let spread = v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64;
        assert!(spread > 0.0002 && spread < 0.0005, "variance {spread}");
    }

    #[test]
    fn linear_applies_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let l = Linear::<f64>::new(&mut rng, 0.02, 3, 2);
        l.bias.set_data(&[1.0, -1.0]);
        let x = Tensor::zeros(&[4, 3]);
        let y = l.forward(&x);
        assert_eq!(y.to_vec(), vec![1.0, -1.0, 1.0, -1.0, 1.0, -1.0, 1.0, -1.0]);
    }
}
