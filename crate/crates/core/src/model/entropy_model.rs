//! Transformer entropy model: a hyper encoder/decoder pair moving
//! side information through a coarser grid, a masked context stack
//! over already-decoded latents, and a linear head fusing both into
//! per-symbol Gaussian parameters. The hyper-latents themselves are
//! modeled by the learned factorized density.
//!
//! Context masks come in three flavors. Serial mode is causal raster
//! decoding: the token sequence is [start, value_0, .., value_{n-2}]
//! so slot i holds only strictly-past values, and slot i's output row
//! parameterizes grid position i. Pass-2 mode feeds decoded slice-1
//! values at their positions, a learned mask token at slice-2 query
//! positions, and restricts keys to slice-1, which makes every
//! slice-2 distribution independent of other slice-2 values and lets
//! one forward pass decode them all. Pretrain mode is the random-mask
//! generalization: corrupted positions are zeroed at the input,
//! excluded as keys, and their context features are zeroed so they
//! train the hyperprior-only regime, while intact positions query the
//! other intact positions (never themselves, which would leak the
//! value being predicted).

use crate::attention::AttnMask;
use crate::config::{ModelConfig, PeKind};
use crate::entropy::{FactorizedDensity, SIGMA_FLOOR};
use crate::error::{Error, Result};
use crate::position::{absolute_pe, ClipRule, PositionGrid, RpeMap};
use crate::tensor::{Scalar, Tensor};

use super::layers::Linear;
use super::transformer::TransformerBlock;
use rand_chacha::ChaCha8Rng;

/// Which attention regime the context stack runs under.
#[derive(Debug, Clone, Copy)]
pub enum ContextMode<'a> {
    /// Teacher-forced causal pass over the whole grid.
    SerialFull,
    /// Causal pass over slots 0..=position only (step decoding);
    /// only the last output row is meaningful.
    SerialPrefix { position: usize },
    /// Checkerboard second pass: keys are the true positions, queries
    /// the rest.
    Pass2 { slice1: &'a [bool] },
    /// Random-mask pretraining: corrupted positions are zeroed inputs,
    /// excluded keys, and zeroed outputs.
    Pretrain { corrupted: &'a [bool] },
}

enum Step {
    Block(usize),
    Rescale(usize),
}

/// Prepared inputs for one context-stack run.
struct CtxSetup<T: Scalar> {
    x: Tensor<T>,
    map: Option<RpeMap>,
    mask: Option<AttnMask>,
    tokens: usize,
    /// Post-run row scaling (pretrain zeroes corrupted rows).
    out_scale: Option<Tensor<T>>,
}

pub struct EntropyModel<T: Scalar> {
    cfg: ModelConfig,
    embed: Linear<T>,
    start_token: Tensor<T>,
    mask_token: Tensor<T>,
    hyper_in: Linear<T>,
    henc_blocks: Vec<TransformerBlock<T>>,
    down: Vec<super::layers::Conv2d<T>>,
    hdec_blocks: Vec<TransformerBlock<T>>,
    up: Vec<super::layers::Conv2d<T>>,
    ctx_blocks: Vec<TransformerBlock<T>>,
    head1: Linear<T>,
    head2: Linear<T>,
    pub density: FactorizedDensity<T>,
}

impl<T: Scalar> EntropyModel<T> {
    pub fn new(cfg: &ModelConfig, rng: &mut ChaCha8Rng, std: f64) -> Self {
        use super::layers::{trunc_normal, Conv2d};
        let d = cfg.d_model;
        let c = cfg.latent_channels;
        let rpe_h = match cfg.pe {
            PeKind::Diamond | PeKind::Rel2d => Some(cfg.rpe_h),
            _ => None,
        };
        let block = |rng: &mut ChaCha8Rng| TransformerBlock::new(rng, std, d, cfg.heads, cfg.ffn_ratio, rpe_h);
        let henc_blocks = (0..cfg.blocks).map(|_| block(rng)).collect();
        let down = (0..cfg.hyper_scales)
            .map(|_| Conv2d::new(rng, std, d, d, 3, 2, 1, d))
            .collect();
        let hdec_blocks = (0..cfg.blocks).map(|_| block(rng)).collect();
        let up = (0..cfg.hyper_scales)
            .map(|_| Conv2d::new(rng, std, d, 4 * d, 3, 1, 1, 1))
            .collect();
        let ctx_blocks = (0..cfg.context_depth()).map(|_| block(rng)).collect();
        EntropyModel {
            cfg: cfg.clone(),
            embed: Linear::new(rng, std, c, d),
            start_token: Tensor::param(trunc_normal(rng, std, d), &[1, d]),
            mask_token: Tensor::param(trunc_normal(rng, std, d), &[1, d]),
            hyper_in: Linear::new(rng, std, c, d),
            henc_blocks,
            down,
            hdec_blocks,
            up,
            ctx_blocks,
            head1: Linear::new(rng, std, 2 * d, 2 * d),
            head2: Linear::new(rng, std, 2 * d, 2 * c),
            density: FactorizedDensity::new(d),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn clip_rule(&self) -> Option<ClipRule> {
        match self.cfg.pe {
            PeKind::Diamond => Some(ClipRule::Diamond),
            PeKind::Rel2d => Some(ClipRule::Rect),
            _ => None,
        }
    }

    fn aligned_map(&self, grid: &PositionGrid) -> Option<RpeMap> {
        self.clip_rule().map(|r| RpeMap::build(r, self.cfg.rpe_h, grid, false))
    }

    fn maybe_add_abs_pe(&self, x: &Tensor<T>, grid: &PositionGrid, tokens: usize) -> Result<Tensor<T>> {
        if self.cfg.pe != PeKind::Absolute {
            return Ok(x.clone());
        }
        let pe = absolute_pe::<T>(grid, self.cfg.d_model)?;
        let pe = if tokens == grid.len() { pe } else { pe.slice(0, 0, tokens) };
        Ok(x.add(&pe))
    }

    /// [C, h, w] -> raster tokens [h*w, C].
    fn to_tokens(y: &Tensor<T>) -> Tensor<T> {
        let s = y.shape().to_vec();
        assert_eq!(s.len(), 3, "latent tensor must be [C, h, w]");
        y.reshape(&[s[0], s[1] * s[2]]).permute(&[1, 0])
    }

    fn hyper_arrangement(&self) -> Vec<Step> {
        let mut steps = Vec::new();
        for i in 0..self.cfg.blocks.max(self.cfg.hyper_scales) {
            if i < self.cfg.blocks {
                steps.push(Step::Block(i));
            }
            if i < self.cfg.hyper_scales {
                steps.push(Step::Rescale(i));
            }
        }
        steps
    }

    /// Continuous latents [C, h, w] -> hyper-latents [d_model, h/f, w/f]
    /// where f is the configured downscale factor.
    pub fn hyper_encode(&self, y: &Tensor<T>) -> Result<Tensor<T>> {
        let s = y.shape().to_vec();
        let f = self.cfg.hyper_factor();
        if s[1] % f != 0 || s[2] % f != 0 {
            return Err(Error::Config(format!(
                "latent grid {}x{} not divisible by the hyper downscale factor {f}",
                s[1], s[2]
            )));
        }
        let mut grid = PositionGrid::new(s[1], s[2]);
        let mut x = self.hyper_in.forward(&Self::to_tokens(y));
        x = self.maybe_add_abs_pe(&x, &grid, grid.len())?;
        let d = self.cfg.d_model;
        for step in self.hyper_arrangement() {
            match step {
                Step::Block(i) => {
                    let map = self.aligned_map(&grid);
                    let k = self.cfg.k_for(grid.len());
                    x = self.henc_blocks[i].forward(&x, map.as_ref(), None, k)?;
                }
                Step::Rescale(i) => {
                    let img = x.permute(&[1, 0]).reshape(&[1, d, grid.height, grid.width]);
                    let down = self.down[i].forward(&img);
                    grid = PositionGrid::new(grid.height / 2, grid.width / 2);
                    x = down.reshape(&[d, grid.len()]).permute(&[1, 0]);
                }
            }
        }
        Ok(x.permute(&[1, 0]).reshape(&[d, grid.height, grid.width]))
    }

    /// Quantized hyper-latents [d_model, hz, wz] -> per-latent-position
    /// feature rows [h*w, d_model]. The caller names the latent extent
    /// it expects; a mismatch with hz*f is an error.
    pub fn hyper_decode(&self, z_hat: &Tensor<T>, latent_extent: (usize, usize)) -> Result<Tensor<T>> {
        let s = z_hat.shape().to_vec();
        let f = self.cfg.hyper_factor();
        if s[1] * f != latent_extent.0 || s[2] * f != latent_extent.1 {
            return Err(Error::Config(format!(
                "hyper grid {}x{} times {f} does not match latent extent {}x{}",
                s[1], s[2], latent_extent.0, latent_extent.1
            )));
        }
        let d = self.cfg.d_model;
        assert_eq!(s[0], d, "hyper-latent channels must equal d_model");
        let mut grid = PositionGrid::new(s[1], s[2]);
        let mut x = Self::to_tokens(z_hat);
        x = self.maybe_add_abs_pe(&x, &grid, grid.len())?;
        for step in self.hyper_arrangement().into_iter().rev() {
            match step {
                Step::Rescale(i) => {
                    let img = x.permute(&[1, 0]).reshape(&[1, d, grid.height, grid.width]);
                    let wide = self.up[i].forward(&img).pixel_shuffle(2);
                    grid = PositionGrid::new(grid.height * 2, grid.width * 2);
                    x = wide.reshape(&[d, grid.len()]).permute(&[1, 0]);
                }
                Step::Block(i) => {
                    let map = self.aligned_map(&grid);
                    let k = self.cfg.k_for(grid.len());
                    x = self.hdec_blocks[i].forward(&x, map.as_ref(), None, k)?;
                }
            }
        }
        Ok(x)
    }

    /// Context features [n, d_model] for the given mode. Rows at
    /// positions whose prediction must ignore context (pretrain
    /// corrupted positions) come back zeroed; pass-1/hyper-only
    /// positions never reach this function at all.
    pub fn context_features(
        &self,
        y_hat: &Tensor<T>,
        grid: &PositionGrid,
        mode: ContextMode<'_>,
    ) -> Result<Tensor<T>> {
        let setup = self.ctx_setup(y_hat, grid, mode)?;
        let out = self.run_ctx(setup.x, setup.map, setup.mask.as_ref(), setup.tokens)?;
        Ok(match setup.out_scale {
            Some(scale) => out.mul(&scale),
            None => out,
        })
    }

    /// Context stack under an arbitrary attention mask over the
    /// aligned grid, with true-value embeddings. Analysis entry point
    /// for per-query key hiding; coding paths use `context_features`.
    pub fn context_features_masked(
        &self,
        y_hat: &Tensor<T>,
        grid: &PositionGrid,
        mask: &AttnMask,
    ) -> Result<Tensor<T>> {
        let n = grid.len();
        if mask.n() != n {
            return Err(Error::Config(format!("mask covers {} tokens, grid has {n}", mask.n())));
        }
        let x = self.embed.forward(&Self::to_tokens(y_hat));
        let x = self.maybe_add_abs_pe(&x, grid, n)?;
        let map = self.clip_rule().map(|r| RpeMap::build(r, self.cfg.rpe_h, grid, false));
        self.run_ctx(x, map, Some(mask), n)
    }

    /// Per-block post-softmax attention maps [heads, n, n] along the
    /// context stack, in block order, for the given mode.
    pub fn context_attention_maps(
        &self,
        y_hat: &Tensor<T>,
        grid: &PositionGrid,
        mode: ContextMode<'_>,
    ) -> Result<Vec<Tensor<T>>> {
        let setup = self.ctx_setup(y_hat, grid, mode)?;
        let k = self.cfg.k_for(setup.tokens);
        let mut x = setup.x;
        let mut maps = Vec::with_capacity(self.ctx_blocks.len());
        for block in &self.ctx_blocks {
            maps.push(block.attention_map(&x, setup.map.as_ref(), setup.mask.as_ref(), k)?);
            x = block.forward(&x, setup.map.as_ref(), setup.mask.as_ref(), k)?;
        }
        Ok(maps)
    }

    fn ctx_setup(
        &self,
        y_hat: &Tensor<T>,
        grid: &PositionGrid,
        mode: ContextMode<'_>,
    ) -> Result<CtxSetup<T>> {
        let s = y_hat.shape().to_vec();
        assert_eq!(
            (s[1], s[2]),
            (grid.height, grid.width),
            "latent tensor extent vs grid"
        );
        let n = grid.len();
        let rule = self.clip_rule();
        let h = self.cfg.rpe_h;
        match mode {
            ContextMode::SerialFull => {
                let tokens = Self::to_tokens(y_hat);
                let e = self.embed.forward(&tokens);
                let x = if n == 1 {
                    self.start_token.clone()
                } else {
                    Tensor::concat(&[&self.start_token, &e.slice(0, 0, n - 1)], 0)
                };
                let x = self.maybe_add_abs_pe(&x, grid, n)?;
                Ok(CtxSetup {
                    x,
                    map: rule.map(|r| RpeMap::build(r, h, grid, true)),
                    mask: Some(AttnMask::causal_raster(n)),
                    tokens: n,
                    out_scale: None,
                })
            }
            ContextMode::SerialPrefix { position } => {
                if position >= n {
                    return Err(Error::Config(format!("prefix position {position} outside grid of {n}")));
                }
                let m = position + 1;
                let x = if position == 0 {
                    self.start_token.clone()
                } else {
                    let tokens = Self::to_tokens(y_hat).slice(0, 0, position);
                    let e = self.embed.forward(&tokens);
                    Tensor::concat(&[&self.start_token, &e], 0)
                };
                let x = self.maybe_add_abs_pe(&x, grid, m)?;
                Ok(CtxSetup {
                    x,
                    map: rule.map(|r| RpeMap::build_prefix(r, h, grid, true, m)),
                    mask: Some(AttnMask::causal_raster(m)),
                    tokens: m,
                    out_scale: None,
                })
            }
            ContextMode::Pass2 { slice1 } => {
                assert_eq!(slice1.len(), n, "slice indicator length");
                let keep = Tensor::from_vec(
                    slice1.iter().map(|&b| if b { T::ONE } else { T::ZERO }).collect(),
                    &[n, 1],
                );
                let drop = keep.neg().add_scalar(T::ONE);
                let e = self.embed.forward(&Self::to_tokens(y_hat));
                let x = e.mul(&keep).add(&self.mask_token.mul(&drop));
                let x = self.maybe_add_abs_pe(&x, grid, n)?;
                Ok(CtxSetup {
                    x,
                    map: rule.map(|r| RpeMap::build(r, h, grid, false)),
                    mask: Some(AttnMask::key_subset(n, slice1)),
                    tokens: n,
                    out_scale: None,
                })
            }
            ContextMode::Pretrain { corrupted } => {
                assert_eq!(corrupted.len(), n, "corruption indicator length");
                let keep_v: Vec<T> = corrupted
                    .iter()
                    .map(|&c| if c { T::ZERO } else { T::ONE })
                    .collect();
                let keep = Tensor::from_vec(keep_v, &[n, 1]);
                // corrupted values replaced by zero before embedding
                let zeroed = Self::to_tokens(y_hat).mul(&keep);
                let x = self.embed.forward(&zeroed);
                let x = self.maybe_add_abs_pe(&x, grid, n)?;
                let allow: Vec<bool> = (0..n * n)
                    .map(|idx| {
                        let (q, kk) = (idx / n, idx % n);
                        !corrupted[kk] && kk != q
                    })
                    .collect();
                Ok(CtxSetup {
                    x,
                    map: rule.map(|r| RpeMap::build(r, h, grid, false)),
                    mask: Some(AttnMask::custom(n, allow)),
                    tokens: n,
                    // corrupted positions train the hyperprior-only regime
                    out_scale: Some(keep),
                })
            }
        }
    }

    fn run_ctx(
        &self,
        mut x: Tensor<T>,
        map: Option<RpeMap>,
        mask: Option<&AttnMask>,
        tokens: usize,
    ) -> Result<Tensor<T>> {
        let k = self.cfg.k_for(tokens);
        for block in &self.ctx_blocks {
            x = block.forward(&x, map.as_ref(), mask, k)?;
        }
        Ok(x)
    }

    /// Fuse hyperprior and context features into per-position Gaussian
    /// parameters: mu [n, C] unconstrained, sigma [n, C] softplus-ed
    /// above the floor.
    pub fn predict_params(
        &self,
        hyper_features: &Tensor<T>,
        context_features: &Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let hs = hyper_features.shape().to_vec();
        let cs = context_features.shape().to_vec();
        if hs != cs || hs.len() != 2 || hs[1] != self.cfg.d_model {
            return Err(Error::Config(format!(
                "feature misalignment: hyper {hs:?} vs context {cs:?}, d_model {}",
                self.cfg.d_model
            )));
        }
        let fused = Tensor::concat(&[hyper_features, context_features], 1);
        let hidden = self.head1.forward(&fused).leaky_relu(T::from_f64(0.01));
        let out = self.head2.forward(&hidden);
        let c = self.cfg.latent_channels;
        let mu = out.slice(1, 0, c);
        let sigma = out.slice(1, c, c).softplus().add_scalar(T::from_f64(SIGMA_FLOOR));
        Ok((mu, sigma))
    }

    pub fn parameters(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        self.embed.parameters("ctx.embed", &mut out);
        out.push(("ctx.start_token".into(), self.start_token.clone()));
        out.push(("ctx.mask_token".into(), self.mask_token.clone()));
        self.hyper_in.parameters("hyper.embed", &mut out);
        for (i, b) in self.henc_blocks.iter().enumerate() {
            b.parameters(&format!("hyper.enc{i}"), &mut out);
        }
        for (i, c) in self.down.iter().enumerate() {
            c.parameters(&format!("hyper.down{i}"), &mut out);
        }
        for (i, b) in self.hdec_blocks.iter().enumerate() {
            b.parameters(&format!("hyper.dec{i}"), &mut out);
        }
        for (i, c) in self.up.iter().enumerate() {
            c.parameters(&format!("hyper.up{i}"), &mut out);
        }
        for (i, b) in self.ctx_blocks.iter().enumerate() {
            b.parameters(&format!("ctx.block{i}"), &mut out);
        }
        self.head1.parameters("head.fuse", &mut out);
        self.head2.parameters("head.out", &mut out);
        for (name, t) in self.density.parameters() {
            out.push((format!("hyper.{name}"), t));
        }
        out
    }
}
