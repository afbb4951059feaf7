//! End-to-end coding paths: hyper round trip, then either serial
//! raster decoding or two-pass parallel checkerboard decoding.
//!
//! The soundness invariant of the whole codec lives here: every
//! Gaussian parameter the encoder uses to build a coding table must
//! equal, bit for bit, the parameter the decoder reconstructs from
//! the partial stream. Encode and decode therefore run the identical
//! f32 code paths (models are trained in f64 and cast once), and the
//! serial encoder's single teacher-forced pass is provably row-equal
//! to the decoder's per-step prefix passes.

use crate::coder::bitstream::{Bitstream, CodecMode};
use crate::coder::{build_cdf, QuantizedCdf, RangeDecoder, RangeEncoder};
use crate::entropy::FactorizedDensity;
use crate::error::{Error, Result};
use crate::imageio::{pad_to_multiple, EXTENT_MULTIPLE};
use crate::model::{model_fingerprint, CodecModel, ContextMode};
use crate::position::PositionGrid;
use crate::tensor::{Scalar, Tensor};

/// Raster-order indicator: true where (row + col) is even. Those
/// positions form slice 1, decoded from the hyperprior alone; the
/// odd positions form slice 2, decoded conditioned on slice 1.
pub fn checkerboard_slice1(grid: &PositionGrid) -> Vec<bool> {
    let mut out = Vec::with_capacity(grid.len());
    for r in 0..grid.height {
        for c in 0..grid.width {
            out.push((r + c) % 2 == 0);
        }
    }
    out
}

pub struct Encoded {
    pub bits: Bitstream,
    /// Quantized latents [C, h, w]; the decoder must reproduce these
    /// exactly.
    pub y_hat: Tensor<f32>,
    /// Quantized hyper-latents [d_model, hz, wz].
    pub z_hat: Tensor<f32>,
    /// Encoder-side reconstruction [1, 3, H, W], cropped and clamped.
    pub x_hat: Tensor<f32>,
}

pub struct Decoded {
    pub image: Tensor<f32>,
    pub y_hat: Tensor<f32>,
    pub z_hat: Tensor<f32>,
    pub stats: DecodeStats,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct DecodeStats {
    /// Entropy-model invocations: one per symbol position in serial
    /// mode, exactly two in parallel mode.
    pub entropy_passes: usize,
}

pub(crate) fn round_symbols<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    t.detach().map_unary(|v| v.round_ties_away(), |_| T::ZERO)
}

pub(crate) fn value_range(t: &Tensor<f32>) -> (i32, i32) {
    let mut lo = i32::MAX;
    let mut hi = i32::MIN;
    for v in t.to_vec() {
        let s = v as i32;
        lo = lo.min(s);
        hi = hi.max(s);
    }
    (lo, hi)
}

fn ceil_multiple(x: usize, m: usize) -> usize {
    x.div_ceil(m) * m
}

/// One integer coding table per hyper channel, from the factorized
/// density evaluated at half-integer bin edges. Encoder and decoder
/// call this with identical weights and ranges, so the tables match.
pub(crate) fn hyper_cdfs(density: &FactorizedDensity<f32>, range: (i32, i32)) -> Result<Vec<QuantizedCdf>> {
    let (lo, hi) = range;
    let span = (hi - lo + 1) as usize;
    let channels = density.channels();
    let mut edge_vals = Vec::with_capacity(channels * (span + 1));
    for _ in 0..channels {
        for j in 0..=span {
            edge_vals.push(lo as f32 + j as f32 - 0.5);
        }
    }
    let edges = Tensor::from_vec(edge_vals, &[channels, span + 1]);
    let cdf = density.cdf(&edges).to_vec();
    let mut out = Vec::with_capacity(channels);
    for ch in 0..channels {
        let row = &cdf[ch * (span + 1)..(ch + 1) * (span + 1)];
        let masses: Vec<f64> = (0..span)
            .map(|j| ((row[j + 1] - row[j]) as f64).max(0.0))
            .collect();
        out.push(QuantizedCdf::from_masses(lo, &masses)?);
    }
    Ok(out)
}

pub(crate) struct LatentCoder<'a> {
    pub(crate) mu: Vec<f32>,
    pub(crate) sigma: Vec<f32>,
    pub(crate) channels: usize,
    pub(crate) range: (i32, i32),
    pub(crate) values: &'a [f32],
    pub(crate) n: usize,
}

impl<'a> LatentCoder<'a> {
    /// Encodes position i's channel symbols; [n, C] parameter layout,
    /// [C, n] value layout.
    pub(crate) fn encode_position(&self, enc: &mut RangeEncoder, i: usize) -> Result<()> {
        for ch in 0..self.channels {
            let cdf = build_cdf(
                self.mu[i * self.channels + ch] as f64,
                self.sigma[i * self.channels + ch] as f64,
                self.range.0,
                self.range.1,
            )?;
            enc.encode_symbol(self.values[ch * self.n + i] as i32, &cdf)?;
        }
        Ok(())
    }
}

/// Compresses an image under the model. Runs everything the decoder
/// will run (hyper decode included) so coding tables agree exactly.
pub fn encode(model: &CodecModel<f64>, x: &Tensor<f32>, mode: CodecMode) -> Result<Encoded> {
    let s = x.shape().to_vec();
    if s.len() != 4 || s[0] != 1 || s[1] != 3 {
        return Err(Error::Image(format!("encode expects [1,3,H,W], got {s:?}")));
    }
    let cfg = model.config().clone();
    let multiple = EXTENT_MULTIPLE * cfg.hyper_factor();
    let (padded, (oh, ow)) = pad_to_multiple(x, multiple);
    let m: CodecModel<f32> = model.cast();

    let y4 = m.analysis.forward(&padded.detach());
    let ys = y4.shape().to_vec();
    let (c, hl, wl) = (ys[1], ys[2], ys[3]);
    let n = hl * wl;
    let y = y4.reshape(&[c, hl, wl]).detach();
    let y_hat = round_symbols(&y);
    let z = m.entropy.hyper_encode(&y)?;
    let z_hat = round_symbols(&z);
    let y_range = value_range(&y_hat);
    let z_range = value_range(&z_hat);

    // hyper segment under the factorized density
    let zcdfs = hyper_cdfs(&m.entropy.density, z_range)?;
    let zv = z_hat.to_vec();
    let zs = z_hat.shape().to_vec();
    let z_per_ch = zs[1] * zs[2];
    let mut enc = RangeEncoder::new();
    for ch in 0..zs[0] {
        for i in 0..z_per_ch {
            enc.encode_symbol(zv[ch * z_per_ch + i] as i32, &zcdfs[ch])?;
        }
    }
    let hyper_seg = enc.finish();

    // latent segments under predicted Gaussians, via the same hyper
    // features the decoder will compute from the decoded z_hat
    let hyper_feats = m.entropy.hyper_decode(&z_hat, (hl, wl))?;
    let grid = PositionGrid::new(hl, wl);
    let yv = y_hat.to_vec();
    let mut segments = vec![hyper_seg];
    match mode {
        CodecMode::Serial => {
            let ctx = m.entropy.context_features(&y_hat, &grid, ContextMode::SerialFull)?;
            let (mu, sigma) = m.entropy.predict_params(&hyper_feats, &ctx)?;
            let coder = LatentCoder {
                mu: mu.to_vec(),
                sigma: sigma.to_vec(),
                channels: c,
                range: y_range,
                values: &yv,
                n,
            };
            let mut enc = RangeEncoder::new();
            for i in 0..n {
                coder.encode_position(&mut enc, i)?;
            }
            segments.push(enc.finish());
        }
        CodecMode::Parallel => {
            let slice1 = checkerboard_slice1(&grid);
            let zero_ctx = Tensor::zeros(&[n, cfg.d_model]);
            let (mu1, sg1) = m.entropy.predict_params(&hyper_feats, &zero_ctx)?;
            let coder1 = LatentCoder {
                mu: mu1.to_vec(),
                sigma: sg1.to_vec(),
                channels: c,
                range: y_range,
                values: &yv,
                n,
            };
            let mut enc = RangeEncoder::new();
            for i in 0..n {
                if slice1[i] {
                    coder1.encode_position(&mut enc, i)?;
                }
            }
            segments.push(enc.finish());

            // pass 2 sees slice-2 inputs only as the mask token, so
            // feeding the true tensor here equals feeding the
            // decoder's merged partial tensor
            let ctx2 = m
                .entropy
                .context_features(&y_hat, &grid, ContextMode::Pass2 { slice1: &slice1 })?;
            let (mu2, sg2) = m.entropy.predict_params(&hyper_feats, &ctx2)?;
            let coder2 = LatentCoder {
                mu: mu2.to_vec(),
                sigma: sg2.to_vec(),
                channels: c,
                range: y_range,
                values: &yv,
                n,
            };
            let mut enc = RangeEncoder::new();
            for i in 0..n {
                if !slice1[i] {
                    coder2.encode_position(&mut enc, i)?;
                }
            }
            segments.push(enc.finish());
        }
    }

    let x_hat = reconstruct(&m, &y_hat, (oh, ow));
    let bits = Bitstream {
        mode,
        model_hash: model_fingerprint(model),
        lambda: cfg.lambda as f32,
        height: oh as u32,
        width: ow as u32,
        y_range,
        z_range,
        segments,
    };
    Ok(Encoded { bits, y_hat, z_hat, x_hat })
}

fn reconstruct(m: &CodecModel<f32>, y_hat: &Tensor<f32>, extent: (usize, usize)) -> Tensor<f32> {
    let s = y_hat.shape().to_vec();
    let y4 = y_hat.reshape(&[1, s[0], s[1], s[2]]);
    m.synthesis
        .forward(&y4)
        .crop2d(extent.0, extent.1)
        .clamp(0.0, 1.0)
        .detach()
}

/// Decompresses a bitstream. Refuses weights whose fingerprint does
/// not match the header; silent corruption is the alternative.
pub fn decode(model: &CodecModel<f64>, bits: &Bitstream) -> Result<Decoded> {
    let fp = model_fingerprint(model);
    if fp != bits.model_hash {
        return Err(Error::Checkpoint(format!(
            "refusing to decode: bitstream was written by weights {:016x}, loaded weights are {fp:016x}",
            bits.model_hash
        )));
    }
    let cfg = model.config().clone();
    let multiple = EXTENT_MULTIPLE * cfg.hyper_factor();
    let (oh, ow) = (bits.height as usize, bits.width as usize);
    let (hp, wp) = (ceil_multiple(oh, multiple), ceil_multiple(ow, multiple));
    let (hl, wl) = (hp / EXTENT_MULTIPLE, wp / EXTENT_MULTIPLE);
    let f = cfg.hyper_factor();
    let (hz, wz) = (hl / f, wl / f);
    let n = hl * wl;
    let c = cfg.latent_channels;
    let d = cfg.d_model;
    let m: CodecModel<f32> = model.cast();

    let zcdfs = hyper_cdfs(&m.entropy.density, bits.z_range)?;
    let mut dec = RangeDecoder::new(&bits.segments[0]);
    let z_per_ch = hz * wz;
    let mut zv = vec![0f32; d * z_per_ch];
    for ch in 0..d {
        for i in 0..z_per_ch {
            zv[ch * z_per_ch + i] = dec.decode_symbol(&zcdfs[ch]) as f32;
        }
    }
    let z_hat = Tensor::from_vec(zv, &[d, hz, wz]);
    let hyper_feats = m.entropy.hyper_decode(&z_hat, (hl, wl))?;
    let grid = PositionGrid::new(hl, wl);
    let mut stats = DecodeStats::default();
    let mut yv = vec![0f32; c * n];

    match bits.mode {
        CodecMode::Serial => {
            let mut dec = RangeDecoder::new(&bits.segments[1]);
            for i in 0..n {
                let partial = Tensor::from_vec(yv.clone(), &[c, hl, wl]);
                let ctx = m
                    .entropy
                    .context_features(&partial, &grid, ContextMode::SerialPrefix { position: i })?;
                let ctx_row = ctx.slice(0, i, 1);
                let hyper_row = hyper_feats.slice(0, i, 1);
                let (mu, sigma) = m.entropy.predict_params(&hyper_row, &ctx_row)?;
                stats.entropy_passes += 1;
                let muv = mu.to_vec();
                let sgv = sigma.to_vec();
                for ch in 0..c {
                    let cdf =
                        build_cdf(muv[ch] as f64, sgv[ch] as f64, bits.y_range.0, bits.y_range.1)?;
                    yv[ch * n + i] = dec.decode_symbol(&cdf) as f32;
                }
            }
        }
        CodecMode::Parallel => {
            let slice1 = checkerboard_slice1(&grid);
            let zero_ctx = Tensor::zeros(&[n, d]);
            let (mu1, sg1) = m.entropy.predict_params(&hyper_feats, &zero_ctx)?;
            stats.entropy_passes += 1;
            let mu1v = mu1.to_vec();
            let sg1v = sg1.to_vec();
            let mut dec = RangeDecoder::new(&bits.segments[1]);
            for i in 0..n {
                if !slice1[i] {
                    continue;
                }
                for ch in 0..c {
                    let cdf = build_cdf(
                        mu1v[i * c + ch] as f64,
                        sg1v[i * c + ch] as f64,
                        bits.y_range.0,
                        bits.y_range.1,
                    )?;
                    yv[ch * n + i] = dec.decode_symbol(&cdf) as f32;
                }
            }
            let partial = Tensor::from_vec(yv.clone(), &[c, hl, wl]);
            let ctx2 = m
                .entropy
                .context_features(&partial, &grid, ContextMode::Pass2 { slice1: &slice1 })?;
            let (mu2, sg2) = m.entropy.predict_params(&hyper_feats, &ctx2)?;
            stats.entropy_passes += 1;
            let mu2v = mu2.to_vec();
            let sg2v = sg2.to_vec();
            let mut dec = RangeDecoder::new(&bits.segments[2]);
            for i in 0..n {
                if slice1[i] {
                    continue;
                }
                for ch in 0..c {
                    let cdf = build_cdf(
                        mu2v[i * c + ch] as f64,
                        sg2v[i * c + ch] as f64,
                        bits.y_range.0,
                        bits.y_range.1,
                    )?;
                    yv[ch * n + i] = dec.decode_symbol(&cdf) as f32;
                }
            }
        }
    }

    let y_hat = Tensor::from_vec(yv, &[c, hl, wl]);
    let image = reconstruct(&m, &y_hat, (oh, ow));
    Ok(Decoded { image, y_hat, z_hat, stats })
}

#[derive(Debug, Clone, Copy)]
pub struct Metrics {
    pub bpp: f64,
    pub psnr: f64,
}

/// bpp over the whole container (header included) against the true
/// image extent; PSNR on the 8-bit scale, capped at 100 dB.
pub fn eval_metrics(x: &Tensor<f32>, x_hat: &Tensor<f32>, bits: &Bitstream) -> Result<Metrics> {
    if x.shape() != x_hat.shape() {
        return Err(Error::Image(format!(
            "metric extents differ: {:?} vs {:?}",
            x.shape(),
            x_hat.shape()
        )));
    }
    let pixels = (bits.height as f64) * (bits.width as f64);
    let bpp = 8.0 * bits.to_bytes().len() as f64 / pixels;
    let a = x.to_vec();
    let b = x_hat.to_vec();
    let mut se = 0.0f64;
    for (p, q) in a.iter().zip(b.iter()) {
        let d = (*p as f64 - *q as f64) * 255.0;
        se += d * d;
    }
    let mse = se / a.len() as f64;
    let psnr = if mse == 0.0 {
        100.0
    } else {
        (10.0 * (255.0f64 * 255.0 / mse).log10()).min(100.0)
    };
    Ok(Metrics { bpp, psnr })
}
