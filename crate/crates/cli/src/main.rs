//! `qflow`: synthetic flow data, training, evaluation and diagnostics.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use qflow_core::data::{
    bicubic_upsample, generate_dataset, load_split, png_export, DatasetSpec, Degradation, KOLMOGOROV_EXPONENT,
};
use qflow_core::flow_conv::ConvVariant;
use qflow_core::gradcheck::{run_suite, SuiteOptions};
use qflow_core::net::NetworkConfig;
use qflow_core::train::{
    ablate, apply_config_text, evaluate, super_resolve, AblationTable, Checkpoint, EvalMode, TrainConfig, Trainer,
};
use qflow_core::{fld, Tensor};

#[derive(Parser)]
#[command(name = "qflow", version, about = "Flow-image super-resolution with QSM and dynamic flow convolution")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic turbulence dataset.
    GenData(GenData),
    /// Train a model on a generated dataset.
    Train(Train),
    /// Score a checkpoint (or a classical baseline) on one split.
    Eval(Eval),
    /// Train and score the ablation tables.
    Ablate(Ablate),
    /// Run the finite-difference gradient suite.
    Gradcheck(Gradcheck),
    /// Write an FLD1 image, or a model's prediction, as PNG.
    ExportPng(ExportPng),
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    train: usize,
    #[arg(long, default_value_t = 16)]
    test: usize,
    /// HR height and width (powers of two).
    #[arg(long, default_value_t = 128)]
    size: usize,
    #[arg(long, value_delimiter = ',', default_value = "2")]
    scales: Vec<usize>,
    #[arg(long, default_value_t = KOLMOGOROV_EXPONENT, allow_hyphen_values = true)]
    exponent: f64,
    /// Replicate one velocity component into all three channels.
    #[arg(long)]
    single_velocity: bool,
    #[arg(long, default_value = "box")]
    degradation: Degradation,
}

/// Network and optimizer overrides; each maps to the `key=value` of the
/// same name in a config file.
#[derive(Args, Default)]
struct Overrides {
    #[arg(long)]
    channels: Option<String>,
    #[arg(long)]
    feu_per_ffb: Option<String>,
    #[arg(long)]
    ffb_count: Option<String>,
    #[arg(long)]
    window: Option<String>,
    #[arg(long)]
    heads: Option<String>,
    #[arg(long)]
    scale: Option<String>,
    /// none | ndc | ldfc | rdfc | adfc | dfc
    #[arg(long)]
    conv: Option<String>,
    /// on | off
    #[arg(long)]
    qsm: Option<String>,
    #[arg(long)]
    qsm_keep_real: Option<String>,
    #[arg(long)]
    qsm_bias: Option<String>,
    #[arg(long)]
    qsm_activation: Option<String>,
    #[arg(long)]
    dfc_k: Option<String>,
    #[arg(long)]
    max_offset: Option<String>,
    #[arg(long)]
    rel_pos_bias: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    batch: Option<String>,
    #[arg(long)]
    iterations: Option<String>,
    #[arg(long)]
    ema_decay: Option<String>,
    #[arg(long)]
    lr_crop: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    eval_every: Option<String>,
    #[arg(long)]
    checkpoint_every: Option<String>,
    #[arg(long)]
    augment: Option<String>,
    /// Shorthand for `--augment off`.
    #[arg(long, conflicts_with = "augment")]
    no_augment: bool,
}

impl Overrides {
    fn pairs(&self) -> Vec<(&'static str, &str)> {
        let all = [
            ("channels", &self.channels),
            ("feu_per_ffb", &self.feu_per_ffb),
            ("ffb_count", &self.ffb_count),
            ("window", &self.window),
            ("heads", &self.heads),
            ("scale", &self.scale),
            ("conv_variant", &self.conv),
            ("qsm_enabled", &self.qsm),
            ("qsm_keep_real", &self.qsm_keep_real),
            ("qsm_bias", &self.qsm_bias),
            ("qsm_activation", &self.qsm_activation),
            ("dfc_k", &self.dfc_k),
            ("max_offset", &self.max_offset),
            ("rel_pos_bias", &self.rel_pos_bias),
            ("lr", &self.lr),
            ("batch", &self.batch),
            ("iterations", &self.iterations),
            ("ema_decay", &self.ema_decay),
            ("lr_crop", &self.lr_crop),
            ("seed", &self.seed),
            ("eval_every", &self.eval_every),
            ("checkpoint_every", &self.checkpoint_every),
            ("augment", &self.augment),
        ];
        let mut out: Vec<_> = all.into_iter().filter_map(|(k, v)| v.as_deref().map(|v| (k, v))).collect();
        if self.no_augment {
            out.push(("augment", "off"));
        }
        out
    }
}

#[derive(Args)]
struct ConfigArgs {
    /// Starting point before the config file and flags are applied.
    #[arg(long, default_value = "desk", value_parser = ["desk", "full", "micro"])]
    profile: String,
    /// `key=value` file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

impl ConfigArgs {
    fn resolve(&self) -> anyhow::Result<(NetworkConfig, TrainConfig)> {
        let (mut net, mut train) = match self.profile.as_str() {
            "full" => (NetworkConfig::full(), TrainConfig::full()),
            "micro" => (NetworkConfig::micro(), TrainConfig::default()),
            _ => (NetworkConfig::desk(), TrainConfig::default()),
        };
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            apply_config_text(&text, &mut net, &mut train)?;
        }
        for (k, v) in self.overrides.pairs() {
            if !net.set(k, v)? {
                train.set(k, v)?;
            }
        }
        net.validate()?;
        train.validate()?;
        Ok((net, train))
    }
}

#[derive(Args)]
struct Train {
    /// Dataset root written by `gen-data`.
    #[arg(long)]
    data: PathBuf,
    /// Run directory for logs and the checkpoint.
    #[arg(long)]
    out: PathBuf,
    /// Continue from `<out>/checkpoint` up to `--iterations`.
    #[arg(long)]
    resume: bool,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint directory (required for `--mode model`).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
    /// Score the EMA shadow instead of the raw weights.
    #[arg(long)]
    ema: bool,
    #[arg(long, default_value = "model", value_parser = ["model", "oracle", "bicubic"])]
    mode: String,
    /// Scale to evaluate when no checkpoint fixes it.
    #[arg(long, default_value_t = 2)]
    scale: usize,
    /// Print comma-separated values instead of the aligned table.
    #[arg(long)]
    csv: bool,
}

#[derive(Args)]
struct Ablate {
    #[arg(long)]
    data: PathBuf,
    /// Subset of components, variants, depth.
    #[arg(long, value_delimiter = ',', default_value = "components,variants,depth")]
    tables: Vec<AblationTable>,
    /// Keep only rows whose local branch is listed.
    #[arg(long, value_delimiter = ',')]
    variants: Option<Vec<ConvVariant>>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct Gradcheck {
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    /// Only cases whose name contains this text.
    #[arg(long)]
    filter: Option<String>,
}

#[derive(Args)]
struct ExportPng {
    /// `[3, H, W]` FLD1 tensor to export.
    #[arg(long, conflicts_with_all = ["checkpoint", "sample"])]
    input: Option<PathBuf>,
    /// Export LR, bicubic, prediction and HR of `--sample` with this checkpoint.
    #[arg(long, requires_all = ["sample", "data"])]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    sample: Option<String>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    ema: bool,
    /// Output file for `--input`, output directory otherwise.
    #[arg(long)]
    out: PathBuf,
}

fn gen_data(a: GenData) -> anyhow::Result<()> {
    let spec = DatasetSpec {
        seed: a.seed,
        train: a.train,
        test: a.test,
        height: a.size,
        width: a.size,
        scales: a.scales,
        exponent: a.exponent,
        single_velocity: a.single_velocity,
        degradation: a.degradation,
    };
    generate_dataset(&a.out, &spec)?;
    println!("wrote {} train / {} test samples to {}", spec.train, spec.test, a.out.display());
    Ok(())
}

fn train(a: Train) -> anyhow::Result<()> {
    let ck_dir = a.out.join("checkpoint");
    let mut trainer = if a.resume {
        let mut ck = Checkpoint::<f32>::load(&ck_dir)?;
        if let Some(it) = &a.config.overrides.iterations {
            ck.train.set("iterations", it)?;
        }
        ck.train.checkpoint_dir = Some(a.out.clone());
        Trainer::from_checkpoint(ck)
    } else {
        let (net, mut cfg) = a.config.resolve()?;
        cfg.checkpoint_dir = Some(a.out.clone());
        Trainer::new(net, cfg)?
    };
    let scale = trainer.net.scale;
    let train = load_split::<f32>(&a.data, "train", scale)?;
    let test = load_split::<f32>(&a.data, "test", scale)?;
    let summary = trainer.run(&train, &test)?;
    let n = summary.losses.len() as u64;
    let first = summary.losses.first().map_or(0, |l| l.0);
    println!("steps {} in {:.1} s", summary.steps, summary.seconds);
    if n > 0 {
        let head = summary.mean_loss(first, first + 100.min(n));
        let tail = summary.mean_loss(summary.steps - 100.min(n), summary.steps);
        println!("mean loss: first {head:.5}  last {tail:.5}");
    }
    for (label, mode) in [
        ("raw", EvalMode::Model(&trainer.params, &trainer.net)),
        ("ema", EvalMode::Model(&trainer.ema, &trainer.net)),
        ("bicubic", EvalMode::Bicubic),
    ] {
        let m = evaluate(&test, mode, label)?.mean();
        println!("{label:<8} PSNR {:.3}  SSIM {:.4}  RMSE {:.3}  MAE {:.3}", m.psnr, m.ssim, m.rmse_255, m.mae_255);
    }
    println!("checkpoint {}", ck_dir.display());
    Ok(())
}

fn eval(a: Eval) -> anyhow::Result<()> {
    let report = match a.mode.as_str() {
        "model" => {
            let Some(dir) = &a.checkpoint else { bail!("--mode model needs --checkpoint") };
            let ck = Checkpoint::<f32>::load(dir)?;
            let samples = load_split::<f32>(&a.data, &a.split, ck.net.scale)?;
            let (params, label) = if a.ema { (&ck.ema, "ema") } else { (&ck.params, "raw") };
            evaluate(&samples, EvalMode::Model(params, &ck.net), &format!("{label} step {}", ck.step))?
        }
        mode => {
            let samples = load_split::<f32>(&a.data, &a.split, a.scale)?;
            let m = if mode == "oracle" { EvalMode::Oracle } else { EvalMode::Bicubic };
            evaluate(&samples, m, mode)?
        }
    };
    print!("{}", if a.csv { report.csv() } else { report.table() });
    Ok(())
}

fn run_ablation(a: Ablate) -> anyhow::Result<()> {
    let (net, cfg) = a.config.resolve()?;
    let train = load_split::<f32>(&a.data, "train", net.scale)?;
    let test = load_split::<f32>(&a.data, "test", net.scale)?;
    let report = ablate(&net, &cfg, &train, &test, &a.tables, a.variants.as_deref(), |msg| eprintln!("{msg}"))?;
    print!("{report}");
    Ok(())
}

fn gradcheck(a: Gradcheck) -> anyhow::Result<()> {
    let opts = SuiteOptions { seeds: a.seeds, filter: a.filter };
    let reports = run_suite(&opts, |r, secs| println!("{r} ({secs:.2} s)"))?;
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    println!("{} cases, {} failed", reports.len(), failed.len());
    if reports.is_empty() {
        bail!("no gradient case matches the filter");
    }
    if !failed.is_empty() {
        bail!("gradient check failed: {}", failed.join(", "));
    }
    Ok(())
}

fn unit_range(t: &Tensor<f32>) -> Tensor<f32> {
    t.map(|v| v.clamp(0.0, 1.0))
}

fn export_png(a: ExportPng) -> anyhow::Result<()> {
    if let Some(input) = &a.input {
        let t: Tensor<f32> = fld::read(input)?;
        let t = match *t.shape() {
            [1, c, h, w] => t.reshape([c, h, w])?,
            _ => t,
        };
        png_export(&t, &a.out)?;
        println!("{}", a.out.display());
        return Ok(());
    }
    let (Some(dir), Some(id), Some(data)) = (&a.checkpoint, &a.sample, &a.data) else {
        bail!("give either --input or --checkpoint with --sample and --data");
    };
    let ck = Checkpoint::<f32>::load(dir)?;
    let samples = load_split::<f32>(data, &a.split, ck.net.scale)?;
    let s = samples.iter().find(|s| &s.id == id).with_context(|| format!("no sample {id:?} in split {}", a.split))?;
    let params = if a.ema { &ck.ema } else { &ck.params };
    let sr = super_resolve(params, &ck.net, &s.lr)?;
    let bic = bicubic_upsample(&s.lr, s.scale)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let write = |name: &str, t: &Tensor<f32>| -> anyhow::Result<()> {
        let path: PathBuf = Path::new(&a.out).join(format!("{id}_{name}.png"));
        png_export(&unit_range(t), &path)?;
        println!("{}", path.display());
        Ok(())
    };
    write("lr", &s.lr)?;
    write("bicubic", &bic)?;
    write("sr", &sr)?;
    write("hr", &s.hr)
}

fn error_line(e: &anyhow::Error) -> String {
    let kind = e.downcast_ref::<qflow_core::Error>().map_or("cli", |c| c.kind());
    let message = format!("{e:#}");
    serde_json::json!({ "error": kind, "message": message }).to_string()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let message = e.to_string();
            let first = message.lines().next().unwrap_or_default().trim_start_matches("error: ");
            eprintln!("{}", serde_json::json!({ "error": "usage", "message": first }));
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => run_ablation(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::ExportPng(a) => export_png(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            ExitCode::FAILURE
        }
    }
}
