//! Model and training configuration with a versioned key=value text
//! format. The same format serves standalone config files and the
//! checkpoint header, so a checkpoint is self-describing.

use crate::error::{Error, Result};
use std::collections::BTreeMap;
use std::fmt::Write as _;

pub const CONFIG_VERSION: u32 = 1;

/// Position information given to the attention stacks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PeKind {
    /// No position signal at all.
    None,
    /// Fixed 2-D sinusoidal encoding added to the token embeddings.
    Absolute,
    /// Dense relative table, each coordinate clamped to [-h, h].
    Rel2d,
    /// Relative table clipped to the l1 diamond with a shared
    /// out-of-range sentinel.
    Diamond,
}

impl PeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PeKind::None => "none",
            PeKind::Absolute => "absolute",
            PeKind::Rel2d => "rel2d",
            PeKind::Diamond => "diamond",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(PeKind::None),
            "absolute" => Ok(PeKind::Absolute),
            "rel2d" => Ok(PeKind::Rel2d),
            "diamond" => Ok(PeKind::Diamond),
            _ => Err(Error::Config(format!(
                "unknown position encoding {s:?} (none|absolute|rel2d|diamond)"
            ))),
        }
    }
}

/// Architecture hyperparameters. Defaults are the desk-scale model;
/// paper-scale values (d_model 384, heads 6, blocks 3, C 384) remain
/// expressible.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    /// Transformer blocks in each hyper stack; the context stack gets
    /// twice this depth.
    pub blocks: usize,
    pub ffn_ratio: usize,
    /// Channels of the coded latent grid.
    pub latent_channels: usize,
    /// Inner channels of the convolutional transforms.
    pub ae_channels: usize,
    /// Per-query surviving attention logits; 0 means dense.
    pub top_k: usize,
    /// Diamond (or rect) radius of the relative-position table.
    pub rpe_h: usize,
    pub pe: PeKind,
    /// Stride-2 stages between latent grid and hyper grid.
    pub hyper_scales: usize,
    /// Rate-distortion weight the weights were trained at; stamped
    /// into bitstreams for display.
    pub lambda: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 48,
            heads: 6,
            blocks: 2,
            ffn_ratio: 4,
            latent_channels: 16,
            ae_channels: 24,
            top_k: 16,
            rpe_h: 3,
            pe: PeKind::Diamond,
            hyper_scales: 2,
            lambda: 0.02,
        }
    }
}

impl ModelConfig {
    /// Miniature geometry for gradient checking: small enough that a
    /// finite-difference sweep of the whole model stays under a minute.
    pub fn miniature() -> Self {
        ModelConfig {
            d_model: 8,
            heads: 2,
            blocks: 1,
            ffn_ratio: 2,
            latent_channels: 2,
            ae_channels: 4,
            top_k: 0,
            rpe_h: 2,
            pe: PeKind::Diamond,
            hyper_scales: 1,
            lambda: 0.02,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.d_model % 2 != 0 {
            return Err(Error::Config("d_model must be even for the absolute-PE variant".into()));
        }
        if self.blocks == 0 || self.ffn_ratio == 0 || self.latent_channels == 0 || self.ae_channels == 0 {
            return Err(Error::Config("zero-sized architecture field".into()));
        }
        if self.hyper_scales == 0 || self.hyper_scales > 3 {
            return Err(Error::Config(format!(
                "hyper_scales {} out of supported range 1..=3",
                self.hyper_scales
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda {} must be finite and >= 0", self.lambda)));
        }
        Ok(())
    }

    /// Effective k for an n-token sequence; None disables filtering.
    pub fn k_for(&self, n: usize) -> Option<usize> {
        if self.top_k == 0 || self.top_k >= n {
            None
        } else {
            Some(self.top_k)
        }
    }

    pub fn context_depth(&self) -> usize {
        2 * self.blocks
    }

    /// Latent-to-hyper spatial downscale factor.
    pub fn hyper_factor(&self) -> usize {
        1 << self.hyper_scales
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "format_version={CONFIG_VERSION}");
        let _ = writeln!(s, "d_model={}", self.d_model);
        let _ = writeln!(s, "heads={}", self.heads);
        let _ = writeln!(s, "blocks={}", self.blocks);
        let _ = writeln!(s, "ffn_ratio={}", self.ffn_ratio);
        let _ = writeln!(s, "latent_channels={}", self.latent_channels);
        let _ = writeln!(s, "ae_channels={}", self.ae_channels);
        let _ = writeln!(s, "top_k={}", self.top_k);
        let _ = writeln!(s, "rpe_h={}", self.rpe_h);
        let _ = writeln!(s, "pe={}", self.pe.as_str());
        let _ = writeln!(s, "hyper_scales={}", self.hyper_scales);
        let _ = writeln!(s, "lambda={}", self.lambda);
        s
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let map = parse_kv(text)?;
        let mut c = ModelConfig::default();
        for (key, value) in &map {
            match key.as_str() {
                "format_version" => {
                    let v: u32 = parse_num(key, value)?;
                    if v != CONFIG_VERSION {
                        return Err(Error::Config(format!("unsupported format_version {v}")));
                    }
                }
                "d_model" => c.d_model = parse_num(key, value)?,
                "heads" => c.heads = parse_num(key, value)?,
                "blocks" => c.blocks = parse_num(key, value)?,
                "ffn_ratio" => c.ffn_ratio = parse_num(key, value)?,
                "latent_channels" => c.latent_channels = parse_num(key, value)?,
                "ae_channels" => c.ae_channels = parse_num(key, value)?,
                "top_k" => c.top_k = parse_num(key, value)?,
                "rpe_h" => c.rpe_h = parse_num(key, value)?,
                "pe" => c.pe = PeKind::parse(value)?,
                "hyper_scales" => c.hyper_scales = parse_num(key, value)?,
                "lambda" => c.lambda = parse_num(key, value)?,
                _ => return Err(Error::Config(format!("unknown model config key {key:?}"))),
            }
        }
        c.validate()?;
        Ok(c)
    }
}

/// Optimization hyperparameters. The schedule works in fractions of
/// the total step budget so toy runs keep the full schedule's shape.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub patch_size: usize,
    pub base_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub warmup_frac: f64,
    pub decay_factor: f64,
    /// The run divides into this many post-warmup decay buckets.
    pub decay_buckets: usize,
    pub grad_clip: f64,
    pub init_std: f64,
    pub mask_ratio: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 4,
            patch_size: 64,
            base_lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            warmup_frac: 0.05,
            decay_factor: 0.75,
            decay_buckets: 5,
            grad_clip: 1.0,
            init_std: 0.02,
            mask_ratio: 0.5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || self.patch_size == 0 {
            return Err(Error::Config("zero-sized training field".into()));
        }
        if self.patch_size % 16 != 0 {
            return Err(Error::Config(format!(
                "patch_size {} must be a multiple of 16",
                self.patch_size
            )));
        }
        if !(self.warmup_frac > 0.0 && self.warmup_frac < 1.0) {
            return Err(Error::Config(format!(
                "warmup_frac {} must lie in (0, 1)",
                self.warmup_frac
            )));
        }
        if !(self.mask_ratio >= 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::Config(format!(
                "mask_ratio {} must lie in [0, 1)",
                self.mask_ratio
            )));
        }
        if self.decay_buckets == 0 {
            return Err(Error::Config("decay_buckets must be positive".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "format_version={CONFIG_VERSION}");
        let _ = writeln!(s, "steps={}", self.steps);
        let _ = writeln!(s, "batch_size={}", self.batch_size);
        let _ = writeln!(s, "patch_size={}", self.patch_size);
        let _ = writeln!(s, "base_lr={}", self.base_lr);
        let _ = writeln!(s, "beta1={}", self.beta1);
        let _ = writeln!(s, "beta2={}", self.beta2);
        let _ = writeln!(s, "adam_eps={}", self.adam_eps);
        let _ = writeln!(s, "warmup_frac={}", self.warmup_frac);
        let _ = writeln!(s, "decay_factor={}", self.decay_factor);
        let _ = writeln!(s, "decay_buckets={}", self.decay_buckets);
        let _ = writeln!(s, "grad_clip={}", self.grad_clip);
        let _ = writeln!(s, "init_std={}", self.init_std);
        let _ = writeln!(s, "mask_ratio={}", self.mask_ratio);
        let _ = writeln!(s, "seed={}", self.seed);
        s
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let map = parse_kv(text)?;
        let mut c = TrainConfig::default();
        for (key, value) in &map {
            match key.as_str() {
                "format_version" => {
                    let v: u32 = parse_num(key, value)?;
                    if v != CONFIG_VERSION {
                        return Err(Error::Config(format!("unsupported format_version {v}")));
                    }
                }
                "steps" => c.steps = parse_num(key, value)?,
                "batch_size" => c.batch_size = parse_num(key, value)?,
                "patch_size" => c.patch_size = parse_num(key, value)?,
                "base_lr" => c.base_lr = parse_num(key, value)?,
                "beta1" => c.beta1 = parse_num(key, value)?,
                "beta2" => c.beta2 = parse_num(key, value)?,
                "adam_eps" => c.adam_eps = parse_num(key, value)?,
                "warmup_frac" => c.warmup_frac = parse_num(key, value)?,
                "decay_factor" => c.decay_factor = parse_num(key, value)?,
                "decay_buckets" => c.decay_buckets = parse_num(key, value)?,
                "grad_clip" => c.grad_clip = parse_num(key, value)?,
                "init_std" => c.init_std = parse_num(key, value)?,
                "mask_ratio" => c.mask_ratio = parse_num(key, value)?,
                "seed" => c.seed = parse_num(key, value)?,
                _ => return Err(Error::Config(format!("unknown train config key {key:?}"))),
            }
        }
        c.validate()?;
        Ok(c)
    }
}

/// key=value per line; blank lines and #-comments allowed; duplicate
/// keys rejected.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!("line {}: expected key=value, got {raw:?}", lineno + 1)));
        };
        let k = k.trim().to_string();
        let v = v.trim().to_string();
        if map.insert(k.clone(), v).is_some() {
            return Err(Error::Config(format!("duplicate config key {k:?}")));
        }
    }
    Ok(map)
}

fn parse_num<N: std::str::FromStr>(key: &str, value: &str) -> Result<N> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("config key {key}: bad value {value:?}")))
}
