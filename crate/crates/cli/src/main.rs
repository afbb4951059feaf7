//! Command-line front end: training, coding, evaluation, benchmarking,
//! and the ablation/inspection commands.
//!
//! Exit codes: 0 success, 1 user error (bad flags, unreadable inputs,
//! refused decode, diverged training), 2 internal error (panic).
//! Every command is deterministic given its --seed.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand, ValueEnum};
use entroformer::coder::bitstream::{Bitstream, CodecMode};
use entroformer::config::PeKind;
use entroformer::imageio::{load_image, save_image, EXTENT_MULTIPLE};
use entroformer::model::{load_model, save_model};
use entroformer::pipeline::{decode, encode, eval_metrics};
use entroformer::studies;
use entroformer::trainer::{self, Corpus};
use entroformer::{CodecModel, Error, ModelConfig, Result, Tensor, TrainConfig};

const VERSION: &str = env!("CARGO_PKG_VERSION");
/// Honored for forward compatibility; the numeric kernels are
/// single-threaded, so values above 1 only produce a note.
const THREADS_VAR: &str = "ENTROFORMER_THREADS";

#[derive(Parser)]
#[command(
    name = "entroformer",
    version,
    about = "Lossy image codec with a transformer entropy model",
    after_help = "Set ENTROFORMER_THREADS to pin the worker thread count (kernels are single-threaded today, so only 1 has an effect)."
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a codec checkpoint end to end
    Train(TrainCmd),
    /// Masked-token pretraining of the context stack
    Pretrain(PretrainCmd),
    /// Compress one image into a bitstream file
    Encode(EncodeCmd),
    /// Reconstruct the image stored in a bitstream file
    Decode(DecodeCmd),
    /// Rate/distortion per image and mean over a file or directory
    Eval(EvalCmd),
    /// Median serial vs parallel decode latency across grid sizes
    Bench(BenchCmd),
    /// Train once per position-encoding kind and compare coded rates
    AblatePe(AblatePeCmd),
    /// Train once per attention sparsity level and compare coded rates
    AblateTopk(AblateTopkCmd),
    /// Compare hyperprior-only, causal, and bidirectional context rates
    AblateContext(AblateContextCmd),
    /// Rate impact of masking context at each relative offset
    PositionImpact(PositionImpactCmd),
    /// Post-softmax attention rows for chosen query positions
    DumpAttention(DumpAttentionCmd),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Serial,
    Parallel,
}

impl Mode {
    fn codec(self) -> CodecMode {
        match self {
            Mode::Serial => CodecMode::Serial,
            Mode::Parallel => CodecMode::Parallel,
        }
    }
}

fn mode_label(mode: CodecMode) -> &'static str {
    match mode {
        CodecMode::Serial => "serial",
        CodecMode::Parallel => "parallel",
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PeArg {
    None,
    Absolute,
    Rel2d,
    Diamond,
}

impl PeArg {
    fn kind(self) -> PeKind {
        match self {
            PeArg::None => PeKind::None,
            PeArg::Absolute => PeKind::Absolute,
            PeArg::Rel2d => PeKind::Rel2d,
            PeArg::Diamond => PeKind::Diamond,
        }
    }
}

/// Model shape flags. A config file sets the full shape; the explicit
/// flags override individual fields on top.
#[derive(Args)]
struct ModelOpts {
    /// Model config file (key=value lines); built-in defaults if omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// Rate-distortion weight
    #[arg(long)]
    lambda: Option<f64>,
    /// Attention survivors per query; 0 keeps every key
    #[arg(long)]
    k: Option<usize>,
    /// Relative-position window radius
    #[arg(long)]
    h: Option<usize>,
    /// Position-encoding kind
    #[arg(long, value_enum)]
    pe: Option<PeArg>,
}

impl ModelOpts {
    fn build(&self) -> Result<ModelConfig> {
        let mut cfg = match &self.config {
            Some(p) => ModelConfig::from_kv(&fs::read_to_string(p)?)?,
            None => ModelConfig::default(),
        };
        if let Some(l) = self.lambda {
            cfg.lambda = l;
        }
        if let Some(k) = self.k {
            cfg.top_k = k;
        }
        if let Some(h) = self.h {
            cfg.rpe_h = h;
        }
        if let Some(pe) = self.pe {
            cfg.pe = pe.kind();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Training schedule flags, again file-then-overrides.
#[derive(Args)]
struct TrainOpts {
    /// Training config file (key=value lines)
    #[arg(long)]
    train_config: Option<PathBuf>,
    /// Optimizer steps
    #[arg(long)]
    steps: Option<usize>,
    /// Images per batch
    #[arg(long)]
    batch: Option<usize>,
    /// Square crop extent in pixels
    #[arg(long)]
    patch: Option<usize>,
    /// Peak learning rate
    #[arg(long)]
    lr: Option<f64>,
    /// Corruption ratio for masked pretraining
    #[arg(long)]
    mask_ratio: Option<f64>,
    /// Seed for init, batching, and quantization noise
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory of training images (.png/.ppm); synthetic corpus if omitted
    #[arg(long)]
    data: Option<PathBuf>,
}

impl TrainOpts {
    fn build(&self) -> Result<TrainConfig> {
        let mut tc = match &self.train_config {
            Some(p) => TrainConfig::from_kv(&fs::read_to_string(p)?)?,
            None => TrainConfig::default(),
        };
        if let Some(v) = self.steps {
            tc.steps = v;
        }
        if let Some(v) = self.batch {
            tc.batch_size = v;
        }
        if let Some(v) = self.patch {
            tc.patch_size = v;
        }
        if let Some(v) = self.lr {
            tc.base_lr = v;
        }
        if let Some(v) = self.mask_ratio {
            tc.mask_ratio = v;
        }
        tc.seed = self.seed;
        tc.validate()?;
        Ok(tc)
    }

    fn corpus(&self) -> Result<Corpus> {
        match &self.data {
            Some(dir) => Corpus::from_dir(dir),
            None => Ok(Corpus::Synthetic),
        }
    }
}

#[derive(Args)]
struct TrainCmd {
    #[command(flatten)]
    model: ModelOpts,
    #[command(flatten)]
    train: TrainOpts,
    /// Decoding schedule the context model is trained for
    #[arg(long, value_enum, default_value_t = Mode::Parallel)]
    mode: Mode,
    /// Checkpoint path to write
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PretrainCmd {
    #[command(flatten)]
    model: ModelOpts,
    #[command(flatten)]
    train: TrainOpts,
    /// Checkpoint path to write
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EncodeCmd {
    /// Input image (.png or .ppm)
    input: PathBuf,
    /// Checkpoint to code with
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_enum, default_value_t = Mode::Parallel)]
    mode: Mode,
    /// Bitstream path to write
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DecodeCmd {
    /// Bitstream file produced by encode
    input: PathBuf,
    /// Checkpoint; must be the one that encoded the stream
    #[arg(long)]
    model: PathBuf,
    /// Image path to write (.png or .ppm)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalCmd {
    /// Image file or directory of images
    input: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_enum, default_value_t = Mode::Parallel)]
    mode: Mode,
    /// Per-image CSV to write alongside the printed table
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchCmd {
    /// Checkpoint to bench; a freshly seeded default model if omitted
    #[arg(long)]
    model: Option<PathBuf>,
    /// Latent grid sizes, comma-separated
    #[arg(long, default_value = "4,8,16")]
    sizes: String,
    /// Timed decodes per point; the median is reported
    #[arg(long, default_value_t = 10)]
    runs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV to write alongside the printed table
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblatePeCmd {
    #[command(flatten)]
    model: ModelOpts,
    #[command(flatten)]
    train: TrainOpts,
    #[arg(long, value_enum, default_value_t = Mode::Parallel)]
    mode: Mode,
    /// Held-out synthetic eval images
    #[arg(long, default_value_t = 4)]
    eval_images: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateTopkCmd {
    #[command(flatten)]
    model: ModelOpts,
    #[command(flatten)]
    train: TrainOpts,
    #[arg(long, value_enum, default_value_t = Mode::Parallel)]
    mode: Mode,
    /// Sparsity levels to sweep, comma-separated; 0 means dense
    #[arg(long, default_value = "4,16,0")]
    ks: String,
    /// Held-out synthetic eval images
    #[arg(long, default_value_t = 4)]
    eval_images: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateContextCmd {
    #[command(flatten)]
    model: ModelOpts,
    #[command(flatten)]
    train: TrainOpts,
    /// Held-out synthetic eval images
    #[arg(long, default_value_t = 4)]
    eval_images: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PositionImpactCmd {
    /// Checkpoint, typically mask-pretrained
    #[arg(long)]
    model: PathBuf,
    /// Offset window radius; offsets range over [-w, w]^2
    #[arg(long, default_value_t = 2)]
    window: isize,
    /// Synthetic probe images
    #[arg(long, default_value_t = 4)]
    images: usize,
    /// Probe image extent in pixels
    #[arg(long, default_value_t = 64)]
    extent: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Permutation iterations for the rank test
    #[arg(long, default_value_t = 10000)]
    perms: usize,
    /// CSV to write alongside the printed table
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DumpAttentionCmd {
    /// Input image
    input: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_enum, default_value_t = Mode::Parallel)]
    mode: Mode,
    /// Query grid positions as row,col pairs: "2,3;0,0"
    #[arg(long, default_value = "0,0")]
    queries: String,
    /// Output stem; writes <stem>.csv plus one .pgm per block/head/query
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help/--version land here too; those are successes.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match std::panic::catch_unwind(std::panic::AssertUnwindSafe(move || run(cli))) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(_) => {
            // The default panic hook already printed the message.
            eprintln!("internal error");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    check_thread_var()?;
    match &cli.cmd {
        Cmd::Train(c) => run_train(c),
        Cmd::Pretrain(c) => run_pretrain(c),
        Cmd::Encode(c) => run_encode(c),
        Cmd::Decode(c) => run_decode(c),
        Cmd::Eval(c) => run_eval(c),
        Cmd::Bench(c) => run_bench(c),
        Cmd::AblatePe(c) => run_ablate_pe(c),
        Cmd::AblateTopk(c) => run_ablate_topk(c),
        Cmd::AblateContext(c) => run_ablate_context(c),
        Cmd::PositionImpact(c) => run_position_impact(c),
        Cmd::DumpAttention(c) => run_dump_attention(c),
    }
}

fn check_thread_var() -> Result<()> {
    let raw = match std::env::var(THREADS_VAR) {
        Ok(v) => v,
        Err(std::env::VarError::NotPresent) => return Ok(()),
        Err(std::env::VarError::NotUnicode(_)) => {
            return Err(Error::Config(format!("{THREADS_VAR} is not valid UTF-8")))
        }
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("{THREADS_VAR} must be a positive integer, got {raw:?}")))?;
    if n == 0 {
        return Err(Error::Config(format!("{THREADS_VAR} must be at least 1")));
    }
    if n > 1 {
        eprintln!("note: {THREADS_VAR}={n} requested, but the kernels are single-threaded; running on one thread");
    }
    Ok(())
}

// ---------------------------------------------------------------- train

fn run_train(c: &TrainCmd) -> Result<()> {
    let cfg = c.model.build()?;
    let tc = c.train.build()?;
    let corpus = c.train.corpus()?;
    let model = trainer::init_model(&cfg, &tc, tc.seed)?;
    let t0 = Instant::now();
    let report = trainer::train(&model, &corpus, &tc, c.mode.codec())?;
    finish_training(&c.out, &model, &cfg, &tc, &report, t0.elapsed())
}

fn run_pretrain(c: &PretrainCmd) -> Result<()> {
    let cfg = c.model.build()?;
    let tc = c.train.build()?;
    let corpus = c.train.corpus()?;
    let model = trainer::init_model(&cfg, &tc, tc.seed)?;
    let t0 = Instant::now();
    let report = trainer::mask_pretrain(&model, &corpus, &tc)?;
    finish_training(&c.out, &model, &cfg, &tc, &report, t0.elapsed())
}

fn finish_training(
    out: &Path,
    model: &CodecModel<f64>,
    cfg: &ModelConfig,
    tc: &TrainConfig,
    report: &trainer::TrainReport,
    elapsed: Duration,
) -> Result<()> {
    save_model(out, model)?;
    let hist_path = PathBuf::from(format!("{}.history.csv", out.display()));
    let mut hist = format!("# version={VERSION}\n");
    hist.push_str(&trainer::history_csv(cfg, tc, &report.history));
    fs::write(&hist_path, hist)?;
    println!(
        "trained {} steps in {:.1}s, final loss {:.6}",
        tc.steps,
        elapsed.as_secs_f64(),
        report.final_total()
    );
    println!("checkpoint: {}", out.display());
    println!("history:    {}", hist_path.display());
    Ok(())
}

// --------------------------------------------------------------- coding

fn run_encode(c: &EncodeCmd) -> Result<()> {
    let model = load_model(&c.model)?;
    let x: Tensor<f32> = load_image(&c.input)?;
    let t0 = Instant::now();
    let enc = encode(&model, &x, c.mode.codec())?;
    let dt = t0.elapsed();
    let bytes = enc.bits.to_bytes();
    fs::write(&c.out, &bytes)?;
    let m = eval_metrics(&x, &enc.x_hat, &enc.bits)?;
    println!(
        "{}: {} bytes, {:.4} bpp, {:.2} dB, {:.0} ms, {} mode",
        c.out.display(),
        bytes.len(),
        m.bpp,
        m.psnr,
        dt.as_secs_f64() * 1e3,
        mode_label(c.mode.codec())
    );
    Ok(())
}

fn run_decode(c: &DecodeCmd) -> Result<()> {
    let model = load_model(&c.model)?;
    let bits = Bitstream::from_bytes(&fs::read(&c.input)?)?;
    let t0 = Instant::now();
    let dec = decode(&model, &bits)?;
    let dt = t0.elapsed();
    save_image(&c.out, &dec.image)?;
    println!(
        "{}: {}x{}, {} entropy passes, {:.0} ms, {} mode",
        c.out.display(),
        bits.width,
        bits.height,
        dec.stats.entropy_passes,
        dt.as_secs_f64() * 1e3,
        mode_label(bits.mode)
    );
    Ok(())
}

fn run_eval(c: &EvalCmd) -> Result<()> {
    let model = load_model(&c.model)?;
    let files = collect_images(&c.input)?;
    let mut rows = Vec::new();
    let mut sum_bpp = 0.0;
    let mut sum_psnr = 0.0;
    for f in &files {
        let x: Tensor<f32> = load_image(f)?;
        let enc = encode(&model, &x, c.mode.codec())?;
        let dec = decode(&model, &enc.bits)?;
        let m = eval_metrics(&x, &dec.image, &enc.bits)?;
        let name = f
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| f.display().to_string());
        println!("{name}: {:.4} bpp, {:.2} dB", m.bpp, m.psnr);
        rows.push(format!("{name},{:.6},{:.4}", m.bpp, m.psnr));
        sum_bpp += m.bpp;
        sum_psnr += m.psnr;
    }
    let n = files.len() as f64;
    println!(
        "mean over {}: {:.4} bpp, {:.2} dB",
        files.len(),
        sum_bpp / n,
        sum_psnr / n
    );
    if let Some(out) = &c.out {
        write_csv(out, Some(model.config()), None, "image,bpp,psnr", &rows)?;
        println!("csv: {}", out.display());
    }
    Ok(())
}

// ---------------------------------------------------------------- bench

fn run_bench(c: &BenchCmd) -> Result<()> {
    if c.runs == 0 {
        return Err(Error::Config("--runs must be at least 1".into()));
    }
    let model = match &c.model {
        Some(p) => load_model(p)?,
        // A fresh model benches the same kernels; wide init keeps the
        // coded latents from collapsing to a degenerate distribution.
        None => CodecModel::from_config_std(&ModelConfig::default(), c.seed, 0.25)?,
    };
    let factor = model.config().hyper_factor();
    let sizes = parse_list::<usize>(&c.sizes, "--sizes")?;
    for &s in &sizes {
        if s == 0 || s % factor != 0 {
            return Err(Error::Config(format!(
                "grid size {s} must be a positive multiple of the hyper downsampling factor {factor}"
            )));
        }
    }
    println!("{:>6}  {:>12}  {:>12}  {:>7}", "grid", "serial ms", "parallel ms", "ratio");
    let mut rows = Vec::new();
    for &s in &sizes {
        let img = trainer::eval_set(c.seed, 1, s * EXTENT_MULTIPLE).pop().expect("one image");
        let enc_s = encode(&model, &img, CodecMode::Serial)?;
        let enc_p = encode(&model, &img, CodecMode::Parallel)?;
        let serial = median_decode_ms(&model, &enc_s.bits, c.runs)?;
        let parallel = median_decode_ms(&model, &enc_p.bits, c.runs)?;
        let ratio = serial / parallel;
        println!("{:>3}x{:<3} {serial:>11.1}  {parallel:>11.1}  {ratio:>7.2}", s, s);
        rows.push(format!("{s},{serial:.3},{parallel:.3},{ratio:.4}"));
    }
    if let Some(out) = &c.out {
        write_csv(
            out,
            Some(model.config()),
            None,
            "grid,serial_ms,parallel_ms,ratio",
            &rows,
        )?;
        println!("csv: {}", out.display());
    }
    Ok(())
}

fn median_decode_ms(model: &CodecModel<f64>, bits: &Bitstream, runs: usize) -> Result<f64> {
    decode(model, bits)?; // warmup, untimed
    let mut times = Vec::with_capacity(runs);
    for _ in 0..runs {
        let t0 = Instant::now();
        let dec = decode(model, bits)?;
        times.push(t0.elapsed().as_secs_f64() * 1e3);
        std::hint::black_box(dec.image);
    }
    times.sort_by(|a, b| a.total_cmp(b));
    Ok(times[times.len() / 2])
}

// ------------------------------------------------------------ ablations

fn held_out_eval(tc: &TrainConfig, count: usize) -> Vec<Tensor<f32>> {
    // Disjoint seed stream from the training corpus sampler.
    trainer::eval_set(tc.seed ^ 0x00e7a1, count, tc.patch_size)
}

fn run_ablate_pe(c: &AblatePeCmd) -> Result<()> {
    let cfg = c.model.build()?;
    let tc = c.train.build()?;
    let corpus = c.train.corpus()?;
    let eval = held_out_eval(&tc, c.eval_images);
    let kinds = [PeKind::None, PeKind::Absolute, PeKind::Rel2d, PeKind::Diamond];
    let points = studies::pe_ablation(&cfg, &tc, &corpus, c.mode.codec(), &eval, &kinds)?;
    print_rate_table("pe", &points);
    if let Some(out) = &c.out {
        write_rate_csv(out, &cfg, &tc, "pe", &points)?;
        println!("csv: {}", out.display());
    }
    Ok(())
}

fn run_ablate_topk(c: &AblateTopkCmd) -> Result<()> {
    let cfg = c.model.build()?;
    let tc = c.train.build()?;
    let corpus = c.train.corpus()?;
    let eval = held_out_eval(&tc, c.eval_images);
    let ks = parse_list::<usize>(&c.ks, "--ks")?;
    let points = studies::topk_ablation(&cfg, &tc, &corpus, c.mode.codec(), &eval, &ks)?;
    print_rate_table("k", &points);
    if let Some(out) = &c.out {
        write_rate_csv(out, &cfg, &tc, "k", &points)?;
        println!("csv: {}", out.display());
    }
    Ok(())
}

fn print_rate_table(key: &str, points: &[studies::RatePoint]) {
    println!("{key:>10}  {:>10}  {:>9}", "bpp", "psnr dB");
    for p in points {
        println!("{:>10}  {:>10.4}  {:>9.2}", p.label, p.bpp, p.psnr);
    }
}

fn write_rate_csv(
    out: &Path,
    cfg: &ModelConfig,
    tc: &TrainConfig,
    key: &str,
    points: &[studies::RatePoint],
) -> Result<()> {
    let rows: Vec<String> = points
        .iter()
        .map(|p| format!("{},{:.6},{:.4}", p.label, p.bpp, p.psnr))
        .collect();
    write_csv(out, Some(cfg), Some(tc), &format!("{key},bpp,psnr"), &rows)
}

fn run_ablate_context(c: &AblateContextCmd) -> Result<()> {
    let cfg = c.model.build()?;
    let tc = c.train.build()?;
    let corpus = c.train.corpus()?;
    let eval = held_out_eval(&tc, c.eval_images);
    let s = studies::context_study(&cfg, &tc, &corpus, &eval)?;
    println!("hyperprior only   {:>10.4} bpp", s.hyper_only_bpp);
    println!(
        "joint context     {:>10.4} bpp  ({:+.2}% vs hyperprior only)",
        s.joint_bpp,
        100.0 * (s.joint_bpp - s.hyper_only_bpp) / s.hyper_only_bpp
    );
    println!("slice 2, causal   {:>10.4} bpp", s.uni_slice2_bpp);
    println!(
        "slice 2, bidir    {:>10.4} bpp  ({:+.2}% vs causal)",
        s.bi_slice2_bpp,
        100.0 * (s.bi_slice2_bpp - s.uni_slice2_bpp) / s.uni_slice2_bpp
    );
    if let Some(out) = &c.out {
        let rows = vec![
            format!("hyper_only,{:.6}", s.hyper_only_bpp),
            format!("joint,{:.6}", s.joint_bpp),
            format!("slice2_causal,{:.6}", s.uni_slice2_bpp),
            format!("slice2_bidirectional,{:.6}", s.bi_slice2_bpp),
        ];
        write_csv(out, Some(&cfg), Some(&tc), "context,bpp", &rows)?;
        println!("csv: {}", out.display());
    }
    Ok(())
}

// ------------------------------------------------------------ analysis

fn run_position_impact(c: &PositionImpactCmd) -> Result<()> {
    if c.images == 0 {
        return Err(Error::Config("--images must be at least 1".into()));
    }
    let model = load_model(&c.model)?;
    let probes: Vec<Tensor<f64>> = trainer::eval_set(c.seed, c.images, c.extent)
        .iter()
        .map(tensor_to_f64)
        .collect();
    let impacts = studies::position_impact(&model, &probes, c.window)?;
    let mut by_delta: Vec<&studies::OffsetImpact> = impacts.iter().collect();
    by_delta.sort_by(|a, b| b.delta_pct.total_cmp(&a.delta_pct));
    println!("{:>4} {:>4}  {:>10}  {:>4}", "dy", "dx", "delta %", "|.|");
    for o in &by_delta {
        println!("{:>4} {:>4}  {:>10.4}  {:>4}", o.dy, o.dx, o.delta_pct, o.l1());
    }
    let l1s: Vec<f64> = impacts.iter().map(|o| o.l1() as f64).collect();
    let deltas: Vec<f64> = impacts.iter().map(|o| o.delta_pct).collect();
    let (rho, p) = studies::spearman_negative_p(&deltas, &l1s, c.perms, c.seed);
    println!("spearman(delta, distance) = {rho:.4}, one-sided p = {p:.5} ({} permutations)", c.perms);
    if let Some(out) = &c.out {
        let rows: Vec<String> = impacts
            .iter()
            .map(|o| format!("{},{},{},{:.6}", o.dy, o.dx, o.l1(), o.delta_pct))
            .collect();
        write_csv(out, Some(model.config()), None, "dy,dx,l1,delta_pct", &rows)?;
        println!("csv: {}", out.display());
    }
    Ok(())
}

fn run_dump_attention(c: &DumpAttentionCmd) -> Result<()> {
    let model = load_model(&c.model)?;
    let x: Tensor<f64> = load_image(&c.input)?;
    let queries = parse_queries(&c.queries)?;
    let maps = studies::attention_maps(&model, &x, c.mode.codec(), &queries)?;

    // Latent grid after padding, for rendering rows as 2-D maps.
    let multiple = EXTENT_MULTIPLE * model.config().hyper_factor();
    let (h, w) = (x.shape()[2], x.shape()[3]);
    let grid_r = h.div_ceil(multiple) * multiple / EXTENT_MULTIPLE;
    let grid_c = w.div_ceil(multiple) * multiple / EXTENT_MULTIPLE;

    let mut rows = Vec::new();
    for m in &maps {
        for (slot, &wgt) in m.weights.iter().enumerate() {
            rows.push(format!(
                "{},{},{},{},{},{:.8},{}",
                m.block, m.head, m.query.0, m.query.1, slot, wgt, m.survivors
            ));
        }
    }
    let csv_path = PathBuf::from(format!("{}.csv", c.out.display()));
    write_csv(
        &csv_path,
        Some(model.config()),
        None,
        "block,head,query_row,query_col,slot,weight,survivors",
        &rows,
    )?;

    for m in &maps {
        let pgm_path = PathBuf::from(format!(
            "{}_b{}_h{}_q{}x{}.pgm",
            c.out.display(),
            m.block,
            m.head,
            m.query.0,
            m.query.1
        ));
        write_attention_pgm(&pgm_path, m, grid_r, grid_c, c.mode.codec())?;
    }
    println!(
        "{} maps ({} blocks x {} heads x {} queries), {} mode",
        maps.len(),
        model.config().context_depth(),
        model.config().heads,
        queries.len(),
        mode_label(c.mode.codec())
    );
    println!("rows: {}", csv_path.display());
    println!("maps: {}_b*_h*_q*.pgm", c.out.display());
    for m in maps.iter().take(4) {
        println!(
            "  block {} head {} query ({},{}): {} survivors",
            m.block, m.head, m.query.0, m.query.1, m.survivors
        );
    }
    Ok(())
}

/// Grayscale map of one attention row. Serial rows carry a start-token
/// slot at index 0 and position j at slot j+1; parallel rows index
/// positions directly.
fn write_attention_pgm(
    path: &Path,
    m: &studies::HeadMap,
    grid_r: usize,
    grid_c: usize,
    mode: CodecMode,
) -> Result<()> {
    let n = grid_r * grid_c;
    let mut vals = vec![0.0f64; n];
    match mode {
        CodecMode::Serial => {
            for (slot, &w) in m.weights.iter().enumerate().skip(1) {
                vals[slot - 1] = w;
            }
        }
        CodecMode::Parallel => {
            for (slot, &w) in m.weights.iter().enumerate() {
                vals[slot] = w;
            }
        }
    }
    let max = vals.iter().fold(0.0f64, |a, &b| a.max(b));
    let mut s = String::new();
    s.push_str("P2\n");
    s.push_str(&format!(
        "# block {} head {} query ({},{}), weights scaled to peak\n",
        m.block, m.head, m.query.0, m.query.1
    ));
    s.push_str(&format!("{grid_c} {grid_r}\n255\n"));
    for r in 0..grid_r {
        let row: Vec<String> = (0..grid_c)
            .map(|c| {
                let v = if max > 0.0 { vals[r * grid_c + c] / max } else { 0.0 };
                format!("{}", (v * 255.0).round() as u8)
            })
            .collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

// -------------------------------------------------------------- helpers

fn tensor_to_f64(t: &Tensor<f32>) -> Tensor<f64> {
    let vals: Vec<f64> = t.to_vec().iter().map(|&v| v as f64).collect();
    Tensor::from_vec(vals, t.shape())
}

fn collect_images(path: &Path) -> Result<Vec<PathBuf>> {
    if !path.is_dir() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(path)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()),
                Some("png") | Some("ppm")
            )
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Image(format!(
            "no .png or .ppm files in {}",
            path.display()
        )));
    }
    Ok(files)
}

fn parse_list<T: std::str::FromStr>(raw: &str, flag: &str) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for part in raw.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        out.push(
            part.parse::<T>()
                .map_err(|_| Error::Config(format!("{flag}: cannot parse {part:?}")))?,
        );
    }
    if out.is_empty() {
        return Err(Error::Config(format!("{flag}: empty list")));
    }
    Ok(out)
}

fn parse_queries(raw: &str) -> Result<Vec<(usize, usize)>> {
    let mut out = Vec::new();
    for pair in raw.split(';') {
        let pair = pair.trim();
        if pair.is_empty() {
            continue;
        }
        let (r, c) = pair
            .split_once(',')
            .ok_or_else(|| Error::Config(format!("query {pair:?} is not row,col")))?;
        let r = r.trim().parse::<usize>();
        let c = c.trim().parse::<usize>();
        match (r, c) {
            (Ok(r), Ok(c)) => out.push((r, c)),
            _ => return Err(Error::Config(format!("query {pair:?} is not row,col"))),
        }
    }
    if out.is_empty() {
        return Err(Error::Config("--queries: empty list".into()));
    }
    Ok(out)
}

/// Writes a CSV with the tool version and the configs that produced it
/// echoed as comment lines, so every artifact is self-describing.
fn write_csv(
    path: &Path,
    cfg: Option<&ModelConfig>,
    tc: Option<&TrainConfig>,
    header: &str,
    rows: &[String],
) -> Result<()> {
    let mut s = format!("# version={VERSION}\n");
    if let Some(cfg) = cfg {
        for line in cfg.to_kv().lines() {
            s.push_str(&format!("# model.{line}\n"));
        }
    }
    if let Some(tc) = tc {
        for line in tc.to_kv().lines() {
            s.push_str(&format!("# train.{line}\n"));
        }
    }
    s.push_str(header);
    s.push('\n');
    for r in rows {
        s.push_str(r);
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}
