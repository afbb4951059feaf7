//! Model stack: convolutional autoencoder plus transformer entropy
//! model, bundled so a checkpoint names every tensor once.

pub mod autoencoder;
pub mod checkpoint;
pub mod entropy_model;
pub mod gdn;
pub mod layers;
pub mod transformer;

pub use autoencoder::{AnalysisTransform, SynthesisTransform};
pub use checkpoint::{load_model, model_fingerprint, save_model};
pub use entropy_model::{ContextMode, EntropyModel};
pub use gdn::Gdn;
pub use transformer::TransformerBlock;

use crate::config::ModelConfig;
use crate::error::Result;
use crate::tensor::{Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Initialization width used when none is configured explicitly.
pub const DEFAULT_INIT_STD: f64 = 0.02;

pub struct CodecModel<T: Scalar> {
    pub analysis: AnalysisTransform<T>,
    pub synthesis: SynthesisTransform<T>,
    pub entropy: EntropyModel<T>,
}

impl<T: Scalar> CodecModel<T> {
    pub fn from_config(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        Self::from_config_std(cfg, seed, DEFAULT_INIT_STD)
    }

    pub fn from_config_std(cfg: &ModelConfig, seed: u64, std: f64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(CodecModel {
            analysis: AnalysisTransform::new(&mut rng, std, cfg.ae_channels, cfg.latent_channels),
            synthesis: SynthesisTransform::new(&mut rng, std, cfg.ae_channels, cfg.latent_channels),
            entropy: EntropyModel::new(cfg, &mut rng, std),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        self.entropy.config()
    }

    /// Every trainable tensor, uniquely named, in construction order.
    pub fn parameters(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        self.analysis.parameters("ae.enc", &mut out);
        self.synthesis.parameters("ae.dec", &mut out);
        out.extend(self.entropy.parameters());
        out
    }

    /// Same architecture, weights converted element-wise. Training
    /// runs in f64; coding runs the cast f32 copy so encoder and
    /// decoder arithmetic agree bit for bit.
    pub fn cast<F: Scalar>(&self) -> CodecModel<F> {
        let dst = CodecModel::<F>::from_config(self.config(), 0).expect("config was validated");
        let src_params = self.parameters();
        let dst_params = dst.parameters();
        assert_eq!(src_params.len(), dst_params.len());
        for ((sn, st), (dn, dt)) in src_params.iter().zip(dst_params.iter()) {
            assert_eq!(sn, dn, "parameter order must be construction-stable");
            let converted: Vec<F> = st.to_vec().into_iter().map(|v| F::from_f64(v.to_f64())).collect();
            dt.set_data(&converted);
        }
        dst
    }
}
