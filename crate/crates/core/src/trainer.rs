//! Toy-scale optimization of the full codec: Adam with warmup plus
//! stepwise decay, global-norm clipping, noise quantization, random
//! mask pretraining, and lambda sweeps that report real coded
//! rate-distortion points. Everything is seeded; a fixed seed and
//! config reproduce the final weights bit for bit.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::coder::bitstream::CodecMode;
use crate::config::{ModelConfig, TrainConfig};
use crate::entropy::{
    gaussian_uniform_likelihood, quantize, rate_bits, rd_loss, QuantizeMode, RdLoss,
};
use crate::error::{Error, Result};
use crate::imageio::EXTENT_MULTIPLE;
use crate::model::{CodecModel, ContextMode};
use crate::pipeline::{checkerboard_slice1, decode, encode, eval_metrics};
use crate::position::PositionGrid;
use crate::tensor::Tensor;

/// Linear ramp to base_lr over the warmup fraction, then stepwise
/// decay: one factor of `decay_factor` per completed bucket of the
/// remaining steps, capped at buckets−1 so the final step sits in the
/// last bucket rather than beyond it.
pub fn lr_schedule(step: usize, total_steps: usize, tc: &TrainConfig) -> f64 {
    assert!(step <= total_steps, "step {step} beyond total {total_steps}");
    let total = total_steps as f64;
    let warmup = tc.warmup_frac * total;
    let s = step as f64;
    if s < warmup {
        return tc.base_lr * s / warmup;
    }
    let buckets = tc.decay_buckets as f64;
    let frac = (s - warmup) / (total - warmup);
    let exponent = (buckets * frac).floor().min(buckets - 1.0);
    tc.base_lr * tc.decay_factor.powf(exponent)
}

/// Adam with per-tensor first/second moment state, no weight decay.
/// `grad_scale` applies global-norm clipping without mutating stored
/// gradients.
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: HashMap<u64, Vec<f64>>,
    v: HashMap<u64, Vec<f64>>,
}

impl Adam {
    pub fn new(tc: &TrainConfig) -> Self {
        Adam {
            beta1: tc.beta1,
            beta2: tc.beta2,
            eps: tc.adam_eps,
            t: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    pub fn step(&mut self, params: &[(String, Tensor<f64>)], lr: f64, grad_scale: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (_, p) in params {
            let Some(grad) = p.grad() else { continue };
            let id = p.id();
            let n = grad.len();
            let m = self.m.entry(id).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(id).or_insert_with(|| vec![0.0; n]);
            let mut data = p.to_vec();
            for i in 0..n {
                let g = grad[i] * grad_scale;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                data[i] -= lr * mh / (vh.sqrt() + self.eps);
            }
            p.set_data(&data);
        }
    }
}

/// Global gradient norm across all parameters (zero-grad tensors
/// contribute nothing).
pub fn global_grad_norm(params: &[(String, Tensor<f64>)]) -> f64 {
    let mut sq = 0.0;
    for (_, p) in params {
        if let Some(g) = p.grad() {
            for v in g {
                sq += v * v;
            }
        }
    }
    sq.sqrt()
}

/// Synthetic texture families keep the repo free of image-data
/// dependencies; a directory corpus covers real files.
pub enum Corpus {
    Synthetic,
    Directory(Vec<Tensor<f64>>),
}

impl Corpus {
    pub fn synthetic() -> Self {
        Corpus::Synthetic
    }

    /// Preloads every .png/.ppm in the directory. Images smaller than
    /// any requested patch fail at sampling time, not here.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let mut images = Vec::new();
        let mut entries: Vec<_> = std::fs::read_dir(dir)?
            .collect::<std::io::Result<Vec<_>>>()?
            .into_iter()
            .map(|e| e.path())
            .collect();
        entries.sort();
        for path in entries {
            let ext = path
                .extension()
                .and_then(|e| e.to_str())
                .map(|e| e.to_ascii_lowercase())
                .unwrap_or_default();
            if ext == "png" || ext == "ppm" {
                images.push(crate::imageio::load_image::<f64>(&path)?);
            }
        }
        if images.is_empty() {
            return Err(Error::Image(format!("no .png/.ppm images in {}", dir.display())));
        }
        Ok(Corpus::Directory(images))
    }

    /// One [B, 3, P, P] batch in [0,1].
    pub fn sample_batch(&self, rng: &mut ChaCha8Rng, batch: usize, patch: usize) -> Result<Tensor<f64>> {
        let mut parts = Vec::with_capacity(batch);
        for _ in 0..batch {
            parts.push(match self {
                Corpus::Synthetic => synthetic_patch(rng, patch),
                Corpus::Directory(images) => {
                    let img = &images[rng.gen_range(0..images.len())];
                    let s = img.shape().to_vec();
                    if s[2] < patch || s[3] < patch {
                        return Err(Error::Image(format!(
                            "corpus image {}x{} smaller than patch {patch}",
                            s[2], s[3]
                        )));
                    }
                    let r = rng.gen_range(0..=s[2] - patch);
                    let c = rng.gen_range(0..=s[3] - patch);
                    img.slice(2, r, patch).slice(3, c, patch)
                }
            });
        }
        let refs: Vec<&Tensor<f64>> = parts.iter().collect();
        Ok(Tensor::concat(&refs, 0).detach())
    }
}

fn synthetic_patch(rng: &mut ChaCha8Rng, p: usize) -> Tensor<f64> {
    match rng.gen_range(0..3u32) {
        0 => gradient_patch(rng, p),
        1 => checker_patch(rng, p),
        _ => blob_patch(rng, p),
    }
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)]
}

fn gradient_patch(rng: &mut ChaCha8Rng, p: usize) -> Tensor<f64> {
    let a = random_color(rng);
    let b = random_color(rng);
    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
    let (dy, dx) = angle.sin_cos();
    let mut data = vec![0.0; 3 * p * p];
    let denom = (p as f64 - 1.0).max(1.0) * std::f64::consts::SQRT_2;
    for y in 0..p {
        for x in 0..p {
            let t = (((y as f64) * dy + (x as f64) * dx) / denom + 0.5).clamp(0.0, 1.0);
            for c in 0..3 {
                data[c * p * p + y * p + x] = a[c] * (1.0 - t) + b[c] * t;
            }
        }
    }
    Tensor::from_vec(data, &[1, 3, p, p])
}

fn checker_patch(rng: &mut ChaCha8Rng, p: usize) -> Tensor<f64> {
    let a = random_color(rng);
    let b = random_color(rng);
    let cell = rng.gen_range(2..=(p / 4).max(2));
    let mut data = vec![0.0; 3 * p * p];
    for y in 0..p {
        for x in 0..p {
            let pick = ((y / cell) + (x / cell)) % 2 == 0;
            for c in 0..3 {
                data[c * p * p + y * p + x] = if pick { a[c] } else { b[c] };
            }
        }
    }
    Tensor::from_vec(data, &[1, 3, p, p])
}

fn blob_patch(rng: &mut ChaCha8Rng, p: usize) -> Tensor<f64> {
    let base = random_color(rng);
    let mut data = vec![0.0; 3 * p * p];
    for c in 0..3 {
        for i in 0..p * p {
            data[c * p * p + i] = base[c];
        }
    }
    let blobs = rng.gen_range(3..=6);
    for _ in 0..blobs {
        let cy = rng.gen_range(0.0..p as f64);
        let cx = rng.gen_range(0.0..p as f64);
        let sigma = rng.gen_range(p as f64 / 8.0..p as f64 / 3.0);
        let color = random_color(rng);
        let amp = rng.gen_range(-0.8..0.8);
        for y in 0..p {
            for x in 0..p {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                let g = amp * (-d2 / (2.0 * sigma * sigma)).exp();
                for c in 0..3 {
                    data[c * p * p + y * p + x] += g * color[c];
                }
            }
        }
    }
    for v in &mut data {
        *v = v.clamp(0.0, 1.0);
    }
    Tensor::from_vec(data, &[1, 3, p, p])
}

/// Which attention regime the context stack trains under.
#[derive(Debug, Clone, Copy)]
pub enum TrainRegime {
    /// Causal raster masks (serial decoding target).
    Serial,
    /// Checkerboard pass-2 masks; slice-1 positions train against
    /// zero context exactly as pass-1 decodes them.
    Parallel,
    /// Random corruption at the given ratio, fresh per image.
    Pretrain { ratio: f64 },
    /// Ablation baseline: context features identically zero, rates
    /// come from the hyperprior alone.
    HyperOnly,
}

impl TrainRegime {
    pub fn for_mode(mode: CodecMode) -> Self {
        match mode {
            CodecMode::Serial => TrainRegime::Serial,
            CodecMode::Parallel => TrainRegime::Parallel,
        }
    }
}

/// Bernoulli corruption that always leaves at least two clean
/// positions: clean queries exclude themselves, so a lone clean
/// token would otherwise have no visible key.
fn sample_corruption(rng: &mut ChaCha8Rng, n: usize, ratio: f64) -> Vec<bool> {
    let mut corrupted: Vec<bool> = (0..n).map(|_| rng.gen_bool(ratio)).collect();
    let mut clean = corrupted.iter().filter(|&&c| !c).count();
    while clean < 2.min(n) {
        let i = rng.gen_range(0..n);
        if corrupted[i] {
            corrupted[i] = false;
            clean += 1;
        }
    }
    corrupted
}

/// Noise-quantized forward pass producing the rate-distortion loss.
/// Context features follow the regime; rates cover every latent and
/// hyper-latent position.
pub fn rd_forward(
    model: &CodecModel<f64>,
    x: &Tensor<f64>,
    regime: TrainRegime,
    rng: &mut ChaCha8Rng,
) -> Result<RdLoss<f64>> {
    let xs = x.shape().to_vec();
    assert_eq!(xs.len(), 4, "rd_forward expects [B,3,P,P]");
    let batch = xs[0];
    let cfg = model.config();
    let d = cfg.d_model;
    let y4 = model.analysis.forward(x);
    let ys = y4.shape().to_vec();
    let (c, hl, wl) = (ys[1], ys[2], ys[3]);
    let n = hl * wl;
    let grid = PositionGrid::new(hl, wl);
    let y_noisy = quantize(&y4, QuantizeMode::TrainNoise, rng);

    let mut latent_bits: Option<Tensor<f64>> = None;
    let mut hyper_bits: Option<Tensor<f64>> = None;
    for i in 0..batch {
        let y_i = y4.slice(0, i, 1).reshape(&[c, hl, wl]);
        let yt_i = y_noisy.slice(0, i, 1).reshape(&[c, hl, wl]);
        let z_i = model.entropy.hyper_encode(&y_i)?;
        let zs = z_i.shape().to_vec();
        let zt_i = quantize(&z_i, QuantizeMode::TrainNoise, rng);
        let feats = model.entropy.hyper_decode(&zt_i, (hl, wl))?;
        let ctx = match regime {
            TrainRegime::Serial => {
                model.entropy.context_features(&yt_i, &grid, ContextMode::SerialFull)?
            }
            TrainRegime::Parallel => {
                let slice1 = checkerboard_slice1(&grid);
                let pass2 =
                    model.entropy.context_features(&yt_i, &grid, ContextMode::Pass2 { slice1: &slice1 })?;
                // slice-1 rows decode against zero context
                let keep: Vec<f64> = slice1.iter().map(|&s| if s { 0.0 } else { 1.0 }).collect();
                pass2.mul(&Tensor::from_vec(keep, &[n, 1]))
            }
            TrainRegime::Pretrain { ratio } => {
                let corrupted = sample_corruption(rng, n, ratio);
                model
                    .entropy
                    .context_features(&yt_i, &grid, ContextMode::Pretrain { corrupted: &corrupted })?
            }
            TrainRegime::HyperOnly => Tensor::zeros(&[n, d]),
        };
        let (mu, sigma) = model.entropy.predict_params(&feats, &ctx)?;
        let y_tokens = yt_i.reshape(&[c, n]).permute(&[1, 0]);
        let p_y = gaussian_uniform_likelihood(&y_tokens, &mu, &sigma);
        let bits_y = rate_bits(&p_y);
        let p_z = model.entropy.density.likelihood(&zt_i.reshape(&[d, zs[1] * zs[2]]));
        let bits_z = rate_bits(&p_z);
        latent_bits = Some(match latent_bits {
            Some(t) => t.add(&bits_y),
            None => bits_y,
        });
        hyper_bits = Some(match hyper_bits {
            Some(t) => t.add(&bits_z),
            None => bits_z,
        });
    }

    let x_hat = model.synthesis.forward(&y_noisy);
    let pixels = batch * xs[2] * xs[3];
    Ok(rd_loss(
        x,
        &x_hat,
        &latent_bits.expect("batch is nonempty"),
        &hyper_bits.expect("batch is nonempty"),
        cfg.lambda,
        pixels,
    ))
}

/// Per-step scalar record for curves and CSV logs.
#[derive(Debug, Clone, Copy)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    pub rate_latents: f64,
    pub rate_hyper: f64,
    pub mse: f64,
    pub grad_norm: f64,
}

pub struct TrainReport {
    pub history: Vec<StepRecord>,
}

impl TrainReport {
    pub fn final_total(&self) -> f64 {
        self.history.last().map(|r| r.total).unwrap_or(f64::NAN)
    }
}

fn check_finite(loss: &RdLoss<f64>, step: usize) -> Result<(f64, f64, f64, f64)> {
    let rl = loss.rate_latents.item();
    let rh = loss.rate_hyper.item();
    let mse = loss.mse.item();
    let total = loss.total.item();
    for (name, v) in [("rate_latents", rl), ("rate_hyper", rh), ("mse", mse)] {
        if !v.is_finite() {
            return Err(Error::Diverged(format!("{name} became {v} at step {step}")));
        }
    }
    Ok((rl, rh, mse, total))
}

/// One optimization step: forward, finite check, backward, clip,
/// Adam. Returns the recorded scalars.
pub fn train_step(
    model: &CodecModel<f64>,
    params: &[(String, Tensor<f64>)],
    opt: &mut Adam,
    x: &Tensor<f64>,
    regime: TrainRegime,
    lr: f64,
    clip: f64,
    step: usize,
    rng: &mut ChaCha8Rng,
) -> Result<StepRecord> {
    let loss = rd_forward(model, x, regime, rng)?;
    let (rl, rh, mse, total) = check_finite(&loss, step)?;
    for (_, p) in params {
        p.zero_grad();
    }
    loss.total.backward();
    let norm = global_grad_norm(params);
    let scale = if norm > clip { clip / norm } else { 1.0 };
    opt.step(params, lr, scale);
    Ok(StepRecord {
        step,
        lr,
        total,
        rate_latents: rl,
        rate_hyper: rh,
        mse,
        grad_norm: norm,
    })
}

/// Builds a fresh model and asserts the truncated-normal contract on
/// every randomly drawn weight: within ±2 std and not collapsed.
pub fn init_model(cfg: &ModelConfig, tc: &TrainConfig, seed: u64) -> Result<CodecModel<f64>> {
    let model = CodecModel::from_config_std(cfg, seed, tc.init_std)?;
    assert_trunc_normal_init(&model, tc.init_std)?;
    Ok(model)
}

/// Random-init tensors are the matmul/conv weights, attention
/// projections, position tables, and the two special tokens; biases
/// and normalization parameters have structured inits and are only
/// checked finite.
pub fn assert_trunc_normal_init(model: &CodecModel<f64>, std: f64) -> Result<()> {
    let bound = 2.0 * std + 1e-12;
    for (name, t) in model.parameters() {
        let values = t.to_vec();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config(format!("non-finite init in {name}")));
        }
        let random_drawn = name.ends_with(".weight")
            || name.ends_with("rpe.table")
            || name.ends_with("start_token")
            || name.ends_with("mask_token");
        if random_drawn {
            for v in &values {
                if v.abs() > bound {
                    return Err(Error::Config(format!(
                        "init of {name} outside +-2 std: |{v}| > {bound}"
                    )));
                }
            }
        }
    }
    Ok(())
}

/// Full optimization run under an explicit context regime; `train`
/// and `mask_pretrain` are the conventional entry points.
pub fn train_with_regime(
    model: &CodecModel<f64>,
    corpus: &Corpus,
    tc: &TrainConfig,
    regime: TrainRegime,
) -> Result<TrainReport> {
    tc.validate()?;
    let multiple = EXTENT_MULTIPLE * model.config().hyper_factor();
    if tc.patch_size % multiple != 0 {
        return Err(Error::Config(format!(
            "patch size {} must be a multiple of {multiple} for this model",
            tc.patch_size
        )));
    }
    let params = model.parameters();
    let mut opt = Adam::new(tc);
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut history = Vec::with_capacity(tc.steps);
    for step in 0..tc.steps {
        let batch = corpus.sample_batch(&mut rng, tc.batch_size, tc.patch_size)?;
        let lr = lr_schedule(step, tc.steps, tc);
        let rec = train_step(model, &params, &mut opt, &batch, regime, lr, tc.grad_clip, step, &mut rng)?;
        history.push(rec);
    }
    Ok(TrainReport { history })
}

/// Rate-distortion training under the masks of the given codec mode.
pub fn train(
    model: &CodecModel<f64>,
    corpus: &Corpus,
    tc: &TrainConfig,
    mode: CodecMode,
) -> Result<TrainReport> {
    train_with_regime(model, corpus, tc, TrainRegime::for_mode(mode))
}

/// Random-mask pretraining at the configured corruption ratio.
pub fn mask_pretrain(model: &CodecModel<f64>, corpus: &Corpus, tc: &TrainConfig) -> Result<TrainReport> {
    train_with_regime(model, corpus, tc, TrainRegime::Pretrain { ratio: tc.mask_ratio })
}

/// Mean coded rate and distortion of real bitstreams over a set.
pub fn eval_model(
    model: &CodecModel<f64>,
    images: &[Tensor<f32>],
    mode: CodecMode,
) -> Result<(f64, f64)> {
    assert!(!images.is_empty(), "empty evaluation set");
    let mut bpp = 0.0;
    let mut psnr = 0.0;
    for x in images {
        let enc = encode(model, x, mode)?;
        let dec = decode(model, &enc.bits)?;
        let m = eval_metrics(x, &dec.image, &enc.bits)?;
        bpp += m.bpp;
        psnr += m.psnr;
    }
    Ok((bpp / images.len() as f64, psnr / images.len() as f64))
}

/// Held-out synthetic images, seeded apart from any training stream.
pub fn eval_set(seed: u64, count: usize, extent: usize) -> Vec<Tensor<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let p = synthetic_patch(&mut rng, extent);
            let v: Vec<f32> = p.to_vec().into_iter().map(|x| x as f32).collect();
            Tensor::from_vec(v, &[1, 3, extent, extent])
        })
        .collect()
}

#[derive(Debug, Clone, Copy)]
pub struct SweepPoint {
    pub lambda: f64,
    pub bpp: f64,
    pub psnr: f64,
}

/// Trains one model per lambda (same seed and schedule) and reports
/// coded rate-distortion on a held-out set.
pub fn lambda_sweep(
    base_cfg: &ModelConfig,
    tc: &TrainConfig,
    corpus: &Corpus,
    lambdas: &[f64],
    mode: CodecMode,
    eval_images: &[Tensor<f32>],
) -> Result<Vec<SweepPoint>> {
    let mut points = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let mut cfg = base_cfg.clone();
        cfg.lambda = lambda;
        let model = init_model(&cfg, tc, tc.seed)?;
        train(&model, corpus, tc, mode)?;
        let (bpp, psnr) = eval_model(&model, eval_images, mode)?;
        points.push(SweepPoint { lambda, bpp, psnr });
    }
    Ok(points)
}

/// Training-curve CSV with the config echoed as comment lines.
pub fn history_csv(cfg: &ModelConfig, tc: &TrainConfig, history: &[StepRecord]) -> String {
    let mut s = String::new();
    for line in cfg.to_kv().lines() {
        let _ = writeln!(s, "# model.{line}");
    }
    for line in tc.to_kv().lines() {
        let _ = writeln!(s, "# train.{line}");
    }
    let _ = writeln!(s, "step,lr,total,rate_latents_bpp,rate_hyper_bpp,mse,grad_norm");
    for r in history {
        let _ = writeln!(
            s,
            "{},{:.8e},{:.8e},{:.8e},{:.8e},{:.8e},{:.8e}",
            r.step, r.lr, r.total, r.rate_latents, r.rate_hyper, r.mse, r.grad_norm
        );
    }
    s
}
