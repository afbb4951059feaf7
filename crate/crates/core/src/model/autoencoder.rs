//! Convolutional main autoencoder: four stride-2 5x5 convolutions
//! with GDN between on the analysis side, mirrored transposed
//! convolutions with IGDN plus a final 3-channel projection on the
//! synthesis side. Deliberately small; the entropy model is the
//! interesting part and this pair is swappable.

use super::gdn::Gdn;
use super::layers::{Conv2d, ConvT2d};
use crate::tensor::{Scalar, Tensor};
use rand_chacha::ChaCha8Rng;

pub struct AnalysisTransform<T: Scalar> {
    convs: Vec<Conv2d<T>>,
    gdns: Vec<Gdn<T>>,
}

impl<T: Scalar> AnalysisTransform<T> {
    pub fn new(rng: &mut ChaCha8Rng, std: f64, inner: usize, latent: usize) -> Self {
        let chans = [3, inner, inner, inner, latent];
        let convs = (0..4)
            .map(|i| Conv2d::new(rng, std, chans[i], chans[i + 1], 5, 2, 2, 1))
            .collect();
        let gdns = (0..3).map(|i| Gdn::new(chans[i + 1])).collect();
        AnalysisTransform { convs, gdns }
    }

    /// [B, 3, H, W] -> [B, C, H/16, W/16]; extents must divide by 16.
    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let s = x.shape();
        assert_eq!(s.len(), 4, "analysis input must be [B, 3, H, W]");
        assert!(
            s[2] % 16 == 0 && s[3] % 16 == 0,
            "analysis input extent {}x{} not a multiple of 16",
            s[2],
            s[3]
        );
        let mut t = x.clone();
        for i in 0..4 {
            t = self.convs[i].forward(&t);
            if i < 3 {
                t = self.gdns[i].forward(&t, false);
            }
        }
        t
    }

    pub fn parameters(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        for (i, c) in self.convs.iter().enumerate() {
            c.parameters(&format!("{prefix}.conv{i}"), out);
        }
        for (i, g) in self.gdns.iter().enumerate() {
            g.parameters(&format!("{prefix}.gdn{i}"), out);
        }
    }
}

pub struct SynthesisTransform<T: Scalar> {
    deconvs: Vec<ConvT2d<T>>,
    igdns: Vec<Gdn<T>>,
    out_proj: Conv2d<T>,
}

impl<T: Scalar> SynthesisTransform<T> {
    pub fn new(rng: &mut ChaCha8Rng, std: f64, inner: usize, latent: usize) -> Self {
        let chans = [latent, inner, inner, inner, inner];
        let deconvs = (0..4)
            .map(|i| ConvT2d::new(rng, std, chans[i], chans[i + 1], 5, 2, 2, 1))
            .collect();
        let igdns = (0..3).map(|i| Gdn::new(chans[i + 1])).collect();
        let out_proj = Conv2d::new(rng, std, inner, 3, 1, 1, 0, 1);
        SynthesisTransform { deconvs, igdns, out_proj }
    }

    /// [B, C, h, w] -> [B, 3, 16h, 16w], unclamped (training needs the
    /// gradient); clamp to [0,1] when materializing an image.
    pub fn forward(&self, y: &Tensor<T>) -> Tensor<T> {
        let mut t = y.clone();
        for i in 0..4 {
            t = self.deconvs[i].forward(&t);
            if i < 3 {
                t = self.igdns[i].forward(&t, true);
            }
        }
        self.out_proj.forward(&t)
    }

    pub fn parameters(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        for (i, c) in self.deconvs.iter().enumerate() {
            c.parameters(&format!("{prefix}.deconv{i}"), out);
        }
        for (i, g) in self.igdns.iter().enumerate() {
            g.parameters(&format!("{prefix}.igdn{i}"), out);
        }
        self.out_proj.parameters(&format!("{prefix}.out"), out);
    }
}
