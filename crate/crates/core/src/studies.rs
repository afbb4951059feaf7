//! Paired-run studies behind the ablation and analysis commands:
//! coded-rate comparisons between context regimes, per-offset rate
//! impact of hiding single context positions, relative-vs-absolute
//! position generalization across grid sizes, and attention-map
//! dumps. Toy-scale runs support directional claims only; none of
//! these report production numbers.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::AttnMask;
use crate::coder::bitstream::{Bitstream, CodecMode};
use crate::coder::RangeEncoder;
use crate::config::{ModelConfig, PeKind, TrainConfig};
use crate::entropy::{gaussian_uniform_likelihood, rate_bits};
use crate::error::{Error, Result};
use crate::imageio::{pad_to_multiple, EXTENT_MULTIPLE};
use crate::model::{CodecModel, ContextMode};
use crate::pipeline::{
    checkerboard_slice1, encode, hyper_cdfs, round_symbols, value_range, LatentCoder,
};
use crate::position::PositionGrid;
use crate::tensor::Tensor;
use crate::trainer::{
    eval_model, eval_set, init_model, train, train_with_regime, Corpus, TrainRegime,
};

/// How latent positions are conditioned when measuring coded size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RateScheme {
    /// Every position coded from the hyperprior alone (zero context).
    HyperOnly,
    /// Production raster mode: one causal segment.
    Serial,
    /// Production two-pass mode: slice 1 zero-context, slice 2
    /// bidirectional on slice 1.
    Checkerboard,
    /// Slice 1 zero-context as in the two-pass mode, slice 2 under
    /// causal raster context. Decodable in raster order within the
    /// slice-2 segment (earlier slice-2 values are already decoded,
    /// slice 1 is known), so this isolates context directionality.
    CausalSlice2,
}

/// Byte counts of the entropy-coded payload, header excluded.
#[derive(Debug, Clone, Copy)]
pub struct StudyRates {
    pub hyper_bytes: usize,
    pub latent_bytes: usize,
    /// Slice-2 segment alone, for schemes that split the slices.
    pub slice2_bytes: Option<usize>,
    pub pixels: usize,
}

fn true_pixels(bits: &Bitstream) -> usize {
    bits.height as usize * bits.width as usize
}

/// Real range-coded payload sizes for one image under one scheme.
pub fn coded_rates(model: &CodecModel<f64>, x: &Tensor<f32>, scheme: RateScheme) -> Result<StudyRates> {
    match scheme {
        RateScheme::Serial => {
            let enc = encode(model, x, CodecMode::Serial)?;
            Ok(StudyRates {
                hyper_bytes: enc.bits.segments[0].len(),
                latent_bytes: enc.bits.segments[1].len(),
                slice2_bytes: None,
                pixels: true_pixels(&enc.bits),
            })
        }
        RateScheme::Checkerboard => {
            let enc = encode(model, x, CodecMode::Parallel)?;
            let s2 = enc.bits.segments[2].len();
            Ok(StudyRates {
                hyper_bytes: enc.bits.segments[0].len(),
                latent_bytes: enc.bits.segments[1].len() + s2,
                slice2_bytes: Some(s2),
                pixels: true_pixels(&enc.bits),
            })
        }
        RateScheme::HyperOnly | RateScheme::CausalSlice2 => coded_rates_custom(model, x, scheme),
    }
}

fn coded_rates_custom(
    model: &CodecModel<f64>,
    x: &Tensor<f32>,
    scheme: RateScheme,
) -> Result<StudyRates> {
    let s = x.shape().to_vec();
    if s.len() != 4 || s[0] != 1 || s[1] != 3 {
        return Err(Error::Image(format!("coded_rates expects [1,3,H,W], got {s:?}")));
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
    let z_hat = round_symbols(&m.entropy.hyper_encode(&y)?);
    let y_range = value_range(&y_hat);
    let z_range = value_range(&z_hat);

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
    let hyper_bytes = enc.finish().len();

    let hyper_feats = m.entropy.hyper_decode(&z_hat, (hl, wl))?;
    let grid = PositionGrid::new(hl, wl);
    let yv = y_hat.to_vec();
    let coder_for = |mu: &Tensor<f32>, sigma: &Tensor<f32>| LatentCoder {
        mu: mu.to_vec(),
        sigma: sigma.to_vec(),
        channels: c,
        range: y_range,
        values: &yv,
        n,
    };

    let zero_ctx = Tensor::zeros(&[n, cfg.d_model]);
    let (mu0, sg0) = m.entropy.predict_params(&hyper_feats, &zero_ctx)?;
    let coder0 = coder_for(&mu0, &sg0);

    let (latent_bytes, slice2_bytes) = match scheme {
        RateScheme::HyperOnly => {
            let mut enc = RangeEncoder::new();
            for i in 0..n {
                coder0.encode_position(&mut enc, i)?;
            }
            (enc.finish().len(), None)
        }
        RateScheme::CausalSlice2 => {
            let slice1 = checkerboard_slice1(&grid);
            let mut enc1 = RangeEncoder::new();
            for i in 0..n {
                if slice1[i] {
                    coder0.encode_position(&mut enc1, i)?;
                }
            }
            let ctx = m.entropy.context_features(&y_hat, &grid, ContextMode::SerialFull)?;
            let (mu, sg) = m.entropy.predict_params(&hyper_feats, &ctx)?;
            let coder = coder_for(&mu, &sg);
            let mut enc2 = RangeEncoder::new();
            for i in 0..n {
                if !slice1[i] {
                    coder.encode_position(&mut enc2, i)?;
                }
            }
            let s2 = enc2.finish().len();
            (enc1.finish().len() + s2, Some(s2))
        }
        _ => unreachable!("production schemes handled above"),
    };

    Ok(StudyRates { hyper_bytes, latent_bytes, slice2_bytes, pixels: oh * ow })
}

/// One trained-and-evaluated variant.
#[derive(Debug, Clone)]
pub struct RatePoint {
    pub label: String,
    pub bpp: f64,
    pub psnr: f64,
}

/// Trains one model per position-encoding kind (same seed, schedule,
/// and data) and codes a held-out set with each.
pub fn pe_ablation(
    base_cfg: &ModelConfig,
    tc: &TrainConfig,
    corpus: &Corpus,
    mode: CodecMode,
    eval: &[Tensor<f32>],
    kinds: &[PeKind],
) -> Result<Vec<RatePoint>> {
    let mut out = Vec::with_capacity(kinds.len());
    for &pe in kinds {
        let mut cfg = base_cfg.clone();
        cfg.pe = pe;
        let model = init_model(&cfg, tc, tc.seed)?;
        train(&model, corpus, tc, mode)?;
        let (bpp, psnr) = eval_model(&model, eval, mode)?;
        out.push(RatePoint { label: pe.as_str().to_string(), bpp, psnr });
    }
    Ok(out)
}

/// Same protocol over attention sparsity values; k = 0 is dense.
pub fn topk_ablation(
    base_cfg: &ModelConfig,
    tc: &TrainConfig,
    corpus: &Corpus,
    mode: CodecMode,
    eval: &[Tensor<f32>],
    ks: &[usize],
) -> Result<Vec<RatePoint>> {
    let mut out = Vec::with_capacity(ks.len());
    for &k in ks {
        let mut cfg = base_cfg.clone();
        cfg.top_k = k;
        let model = init_model(&cfg, tc, tc.seed)?;
        train(&model, corpus, tc, mode)?;
        let (bpp, psnr) = eval_model(&model, eval, mode)?;
        let label = if k == 0 { "dense".to_string() } else { format!("k={k}") };
        out.push(RatePoint { label, bpp, psnr });
    }
    Ok(out)
}

/// Payload bits per pixel of the joint model against the
/// hyperprior-only baseline, and of bidirectional against causal
/// slice-2 context. Each variant trains under the regime it is
/// evaluated in, from the same seed.
#[derive(Debug, Clone, Copy)]
pub struct ContextStudy {
    pub hyper_only_bpp: f64,
    pub joint_bpp: f64,
    pub uni_slice2_bpp: f64,
    pub bi_slice2_bpp: f64,
}

pub fn context_study(
    base_cfg: &ModelConfig,
    tc: &TrainConfig,
    corpus: &Corpus,
    eval: &[Tensor<f32>],
) -> Result<ContextStudy> {
    assert!(!eval.is_empty(), "empty evaluation set");
    let m_bi = init_model(base_cfg, tc, tc.seed)?;
    train(&m_bi, corpus, tc, CodecMode::Parallel)?;
    let m_uni = init_model(base_cfg, tc, tc.seed)?;
    train(&m_uni, corpus, tc, CodecMode::Serial)?;
    let m_hyper = init_model(base_cfg, tc, tc.seed)?;
    train_with_regime(&m_hyper, corpus, tc, TrainRegime::HyperOnly)?;

    let mut joint = (0usize, 0usize);
    let mut bi2 = 0usize;
    let mut hyper = (0usize, 0usize);
    let mut uni2 = (0usize, 0usize);
    for x in eval {
        let r = coded_rates(&m_bi, x, RateScheme::Checkerboard)?;
        joint.0 += r.hyper_bytes + r.latent_bytes;
        joint.1 += r.pixels;
        bi2 += r.slice2_bytes.expect("checkerboard splits slices");
        let r = coded_rates(&m_hyper, x, RateScheme::HyperOnly)?;
        hyper.0 += r.hyper_bytes + r.latent_bytes;
        hyper.1 += r.pixels;
        let r = coded_rates(&m_uni, x, RateScheme::CausalSlice2)?;
        uni2.0 += r.slice2_bytes.expect("split scheme");
        uni2.1 += r.pixels;
    }
    let bpp = |bytes: usize, px: usize| 8.0 * bytes as f64 / px as f64;
    Ok(ContextStudy {
        hyper_only_bpp: bpp(hyper.0, hyper.1),
        joint_bpp: bpp(joint.0, joint.1),
        uni_slice2_bpp: bpp(uni2.0, uni2.1),
        bi_slice2_bpp: bpp(bi2, joint.1),
    })
}

/// Rate change when the context position at one relative offset is
/// hidden from every query at once.
#[derive(Debug, Clone, Copy)]
pub struct OffsetImpact {
    pub dy: isize,
    pub dx: isize,
    pub delta_pct: f64,
}

impl OffsetImpact {
    pub fn l1(&self) -> usize {
        (self.dy.unsigned_abs()) + (self.dx.unsigned_abs())
    }
}

fn rounded_latents(model: &CodecModel<f64>, x: &Tensor<f64>) -> Result<(Tensor<f64>, Tensor<f64>, PositionGrid)> {
    let s = x.shape().to_vec();
    if s.len() != 4 || s[0] != 1 || s[1] != 3 {
        return Err(Error::Image(format!("expected [1,3,H,W], got {s:?}")));
    }
    let multiple = EXTENT_MULTIPLE * model.config().hyper_factor();
    let (padded, _) = pad_to_multiple(x, multiple);
    let y4 = model.analysis.forward(&padded.detach());
    let ys = y4.shape().to_vec();
    let y = y4.reshape(&[ys[1], ys[2], ys[3]]).detach();
    let y_hat = round_symbols(&y);
    let z_hat = round_symbols(&model.entropy.hyper_encode(&y)?);
    let feats = model.entropy.hyper_decode(&z_hat, (ys[2], ys[3]))?;
    Ok((y_hat, feats, PositionGrid::new(ys[2], ys[3])))
}

fn masked_rate_bits(
    model: &CodecModel<f64>,
    y_hat: &Tensor<f64>,
    feats: &Tensor<f64>,
    grid: &PositionGrid,
    mask: AttnMask,
) -> Result<f64> {
    let ctx = model.entropy.context_features_masked(y_hat, grid, &mask)?;
    let (mu, sigma) = model.entropy.predict_params(feats, &ctx)?;
    let s = y_hat.shape().to_vec();
    let tokens = y_hat.reshape(&[s[0], grid.len()]).permute(&[1, 0]);
    let p = gaussian_uniform_likelihood(&tokens, &mu, &sigma);
    Ok(rate_bits(&p).item())
}

/// Measures, over a window of relative offsets, the total-rate impact
/// of hiding that offset's key from every query. The baseline is full
/// bidirectional self-excluded attention, the regime a mask-pretrained
/// model was trained to tolerate. Rates are model estimates at the
/// rounded latents, aggregated over the given images.
pub fn position_impact(
    model: &CodecModel<f64>,
    images: &[Tensor<f64>],
    window: isize,
) -> Result<Vec<OffsetImpact>> {
    assert!(!images.is_empty(), "empty probe set");
    assert!(window >= 1, "window must be at least 1");
    let mut offsets = Vec::new();
    for dy in -window..=window {
        for dx in -window..=window {
            if (dy, dx) != (0, 0) {
                offsets.push((dy, dx));
            }
        }
    }
    let mut bits_full = 0.0;
    let mut bits_off = vec![0.0; offsets.len()];
    for x in images {
        let (y_hat, feats, grid) = rounded_latents(model, x)?;
        let n = grid.len();
        let base: Vec<bool> = (0..n * n).map(|idx| idx / n != idx % n).collect();
        bits_full += masked_rate_bits(model, &y_hat, &feats, &grid, AttnMask::custom(n, base.clone()))?;
        for (oi, &(dy, dx)) in offsets.iter().enumerate() {
            let mut allow = base.clone();
            for q in 0..n {
                let (qr, qc) = (q / grid.width, q % grid.width);
                let (kr, kc) = (qr as isize + dy, qc as isize + dx);
                if kr >= 0 && kc >= 0 && (kr as usize) < grid.height && (kc as usize) < grid.width {
                    allow[q * n + kr as usize * grid.width + kc as usize] = false;
                }
            }
            bits_off[oi] += masked_rate_bits(model, &y_hat, &feats, &grid, AttnMask::custom(n, allow))?;
        }
    }
    Ok(offsets
        .into_iter()
        .zip(bits_off)
        .map(|((dy, dx), b)| OffsetImpact {
            dy,
            dx,
            delta_pct: 100.0 * (b - bits_full) / bits_full,
        })
        .collect())
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).expect("non-finite rank input"));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for t in &idx[i..=j] {
            r[*t] = avg;
        }
        i = j + 1;
    }
    r
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    let denom = (va * vb).sqrt();
    if denom == 0.0 {
        0.0
    } else {
        cov / denom
    }
}

/// Rank correlation with average ranks on ties.
pub fn spearman_rho(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    assert!(xs.len() >= 2, "need at least two pairs");
    pearson(&ranks(xs), &ranks(ys))
}

/// One-sided permutation test for negative rank correlation. Returns
/// (rho, p) with p = P(rho_perm <= rho_observed), add-one smoothed.
pub fn spearman_negative_p(xs: &[f64], ys: &[f64], iters: usize, seed: u64) -> (f64, f64) {
    let rho = spearman_rho(xs, ys);
    let rx = ranks(xs);
    let mut ry = ranks(ys);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut at_most = 0usize;
    for _ in 0..iters {
        ry.shuffle(&mut rng);
        if pearson(&rx, &ry) <= rho {
            at_most += 1;
        }
    }
    (rho, (at_most + 1) as f64 / (iters + 1) as f64)
}

/// Coded rate of one model at its training extent and at double it.
#[derive(Debug, Clone)]
pub struct GeneralizationPoint {
    pub pe: String,
    pub small_bpp: f64,
    pub large_bpp: f64,
}

impl GeneralizationPoint {
    /// Rate penalty for coding grids twice the trained size.
    pub fn degradation(&self) -> f64 {
        self.large_bpp - self.small_bpp
    }
}

/// Trains one model per position-encoding kind at the training patch
/// size, then codes held-out images at that size and at twice it. A
/// relative table carries the same offsets to any grid; the sinusoidal
/// absolute baseline exposes attention to phase patterns it never
/// trained on.
pub fn pe_generalization(
    base_cfg: &ModelConfig,
    tc: &TrainConfig,
    corpus: &Corpus,
    mode: CodecMode,
    kinds: &[PeKind],
    eval_seed: u64,
    eval_count: usize,
) -> Result<Vec<GeneralizationPoint>> {
    let small = eval_set(eval_seed, eval_count, tc.patch_size);
    let large = eval_set(eval_seed ^ 0x9e3779b9, eval_count, 2 * tc.patch_size);
    let mut out = Vec::with_capacity(kinds.len());
    for &pe in kinds {
        let mut cfg = base_cfg.clone();
        cfg.pe = pe;
        let model = init_model(&cfg, tc, tc.seed)?;
        train(&model, corpus, tc, mode)?;
        let (small_bpp, _) = eval_model(&model, &small, mode)?;
        let (large_bpp, _) = eval_model(&model, &large, mode)?;
        out.push(GeneralizationPoint { pe: pe.as_str().to_string(), small_bpp, large_bpp });
    }
    Ok(out)
}

/// One post-softmax attention row of the context stack.
#[derive(Debug, Clone)]
pub struct HeadMap {
    pub block: usize,
    pub head: usize,
    pub query: (usize, usize),
    /// Weights over key slots, length n. In serial mode slot 0 is the
    /// start token and slot j holds position j-1; in parallel mode
    /// slot j holds position j.
    pub weights: Vec<f64>,
    /// Keys with nonzero weight: min(top-k, allowed keys).
    pub survivors: usize,
}

/// Attention rows for chosen query positions under the masks of the
/// given codec mode, one entry per (block, head, query).
pub fn attention_maps(
    model: &CodecModel<f64>,
    x: &Tensor<f64>,
    mode: CodecMode,
    queries: &[(usize, usize)],
) -> Result<Vec<HeadMap>> {
    let (y_hat, _, grid) = rounded_latents(model, x)?;
    for &(r, c) in queries {
        if r >= grid.height || c >= grid.width {
            return Err(Error::Config(format!(
                "query ({r},{c}) outside {}x{} latent grid",
                grid.height, grid.width
            )));
        }
    }
    let slice1 = checkerboard_slice1(&grid);
    let ctx_mode = match mode {
        CodecMode::Serial => ContextMode::SerialFull,
        CodecMode::Parallel => ContextMode::Pass2 { slice1: &slice1 },
    };
    let maps = model.entropy.context_attention_maps(&y_hat, &grid, ctx_mode)?;
    let n = grid.len();
    let mut out = Vec::new();
    for (block, map) in maps.iter().enumerate() {
        let shape = map.shape().to_vec();
        let heads = shape[0];
        let mv = map.to_vec();
        for head in 0..heads {
            for &(r, c) in queries {
                let qi = r * grid.width + c;
                let row = mv[head * n * n + qi * n..head * n * n + (qi + 1) * n].to_vec();
                let survivors = row.iter().filter(|&&w| w > 0.0).count();
                out.push(HeadMap { block, head, query: (r, c), weights: row, survivors });
            }
        }
    }
    Ok(out)
}
