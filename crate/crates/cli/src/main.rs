mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use stlight::data::{generate, read_dataset, write_dataset, GeneratorSpec, SpriteKind};
use stlight::model::complexity::{receptive_field_patches, receptive_field_pixels};
use stlight::model::{checkpoint, count_flops_batch, count_params, layer_table, Model, ModelConfig};
use stlight::train::{check_compatible, evaluate_baseline, evaluate_model, predict_dump, train};
use stlight::Error;

use config::{usage, UsageError};

#[derive(Parser)]
#[command(name = "stlight", version, about = "Train, evaluate and inspect STLight frame-prediction models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic moving-sprite dataset.
    GenData(GenDataArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Write predicted frames as images.
    Predict(PredictArgs),
    /// Report parameters, MACs and receptive fields for a config.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Number of sequences.
    #[arg(long, default_value_t = 64)]
    n: usize,
    /// Frames per sequence, past plus future.
    #[arg(long, default_value_t = 20)]
    t_total: usize,
    /// Past frames (default: half of --t-total).
    #[arg(long)]
    t_past: Option<usize>,
    /// Frame height and width.
    #[arg(long, default_value_t = 16)]
    hw: usize,
    /// Sprites per sequence.
    #[arg(long, default_value_t = 2)]
    shapes: usize,
    /// Sprite kind: square or cross.
    #[arg(long, default_value = "square")]
    kind: String,
    /// Sprite side length in pixels.
    #[arg(long, default_value_t = 4)]
    size: usize,
    #[arg(long, default_value_t = 0.5)]
    speed_min: f64,
    #[arg(long, default_value_t = 1.5)]
    speed_max: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

/// Config sources shared by `train` and `inspect`.
#[derive(Args)]
struct ConfigArgs {
    /// key = value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from a named model (mmnist-xs, mmnist-s, mmnist-m, mmnist-l, taxibj).
    #[arg(long)]
    preset: Option<String>,
    /// Override any config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn overrides(&self) -> Result<Vec<(String, String)>> {
        self.set.iter().map(|s| config::split_override(s)).collect()
    }

    fn resolve(&self, extra: Vec<(String, String)>) -> Result<stlight::train::TrainConfig> {
        let base = self.preset.as_deref().map(config::preset).transpose()?;
        let mut overrides = self.overrides()?;
        overrides.extend(extra);
        config::resolve(base, self.config.as_deref(), &overrides)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Training dataset.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    val_data: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// JSON-lines training log.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    max_lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// onecycle, cosine or constant.
    #[arg(long)]
    schedule: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    /// Print a single JSON object instead of key=value lines.
    #[arg(long)]
    json: bool,
    /// Also report the copy-last-frame baseline.
    #[arg(long)]
    baseline: bool,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Output directory for the images.
    #[arg(long)]
    out: PathBuf,
    /// Only the first N sequences.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args)]
struct InspectArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Batch size for the MAC count.
    #[arg(long, default_value_t = 1)]
    batch: usize,
    /// Skip building the model to count parameters by enumeration.
    #[arg(long)]
    no_enumerate: bool,
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let kind = SpriteKind::parse(&a.kind).ok_or_else(|| usage(format!("unknown sprite kind `{}`", a.kind)))?;
    let spec = GeneratorSpec {
        n_sequences: a.n,
        t_total: a.t_total,
        t_past: a.t_past.unwrap_or(a.t_total / 2),
        height: a.hw,
        width: a.hw,
        n_shapes: a.shapes,
        kind,
        size: a.size,
        speed: (a.speed_min, a.speed_max),
        seed: a.seed,
    };
    spec.validate().map_err(|e| usage(e.to_string()))?;
    let ds = generate(&spec)?;
    write_dataset(&ds, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    let bytes = std::fs::metadata(&a.out)?.len();
    let [c, h, w] = ds.frame_dims();
    println!(
        "wrote {} sequences of [{}, {c}, {h}, {w}] (t_past {}) to {} ({bytes} bytes)",
        ds.len(),
        ds.t_total(),
        ds.t_past(),
        a.out.display()
    );
    Ok(())
}

fn run_train(a: &TrainArgs) -> Result<()> {
    let mut extra = Vec::new();
    let mut flag = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            extra.push((k.to_string(), v));
        }
    };
    let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
    flag("train_data", path(&a.data));
    flag("val_data", path(&a.val_data));
    flag("checkpoint", path(&a.checkpoint));
    flag("log", path(&a.log));
    flag("epochs", a.epochs.map(|v| v.to_string()));
    flag("max_lr", a.max_lr.map(|v| v.to_string()));
    flag("batch_size", a.batch_size.map(|v| v.to_string()));
    flag("seed", a.seed.map(|v| v.to_string()));
    flag("schedule", a.schedule.clone());
    let mut cfg = a.cfg.resolve(extra)?;
    if cfg.train_data.is_none() {
        return Err(usage("no training data: pass --data or set train_data"));
    }
    cfg.checkpoint.get_or_insert_with(|| PathBuf::from("stlight.stlw"));
    cfg.log.get_or_insert_with(|| PathBuf::from("train_log.jsonl"));
    let (_, log) = train(&cfg)?;
    println!(
        "trained {} steps over {} epochs in {:.1}s; final loss {}; best val mse {}",
        log.steps.len(),
        cfg.epochs,
        log.wall_clock_s,
        log.final_loss().map_or("n/a".into(), |l| format!("{l:.6}")),
        log.best_val_mse.map_or("n/a".into(), |l| format!("{l:.6}")),
    );
    println!(
        "checkpoint {}; log {}",
        cfg.checkpoint.as_deref().map_or("".into(), |p| p.display().to_string()),
        cfg.log.as_deref().map_or("".into(), |p| p.display().to_string()),
    );
    Ok(())
}

fn load_pair(checkpoint_path: &Path, data: &Path) -> Result<(Model<f32>, stlight::data::SequenceBatch)> {
    let model = checkpoint::load_checkpoint(checkpoint_path)
        .with_context(|| format!("loading checkpoint {}", checkpoint_path.display()))?;
    let ds = read_dataset(data).with_context(|| format!("reading dataset {}", data.display()))?;
    check_compatible(model.config(), &ds)?;
    Ok((model, ds))
}

fn run_eval(a: &EvalArgs) -> Result<()> {
    if a.batch_size == 0 {
        return Err(usage("--batch-size must be positive"));
    }
    let (model, ds) = load_pair(&a.checkpoint, &a.data)?;
    let report = evaluate_model(&model, &ds, a.batch_size)?;
    let baseline = a.baseline.then(|| evaluate_baseline(&ds, a.batch_size)).transpose()?;
    if a.json {
        let mut v = serde_json::json!({ "model": report });
        if let Some(b) = baseline {
            v["copy_last"] = serde_json::to_value(b)?;
        }
        println!("{v}");
    } else {
        print!("{}", report.to_key_value());
        if let Some(b) = baseline {
            for line in b.to_key_value().lines() {
                println!("copy_last.{line}");
            }
        }
    }
    Ok(())
}

fn run_predict(a: &PredictArgs) -> Result<()> {
    let (model, mut ds) = load_pair(&a.checkpoint, &a.data)?;
    if let Some(n) = a.limit {
        if n == 0 {
            return Err(usage("--limit must be positive"));
        }
        ds = ds.select(&(0..n.min(ds.len())).collect::<Vec<_>>())?;
    }
    let files = predict_dump(&model, &ds.past()?, Some(&ds.future()?), &a.out)?;
    println!("wrote {} images to {}", files.len(), a.out.display());
    Ok(())
}

fn inspect(a: &InspectArgs) -> Result<()> {
    if a.batch == 0 {
        return Err(usage("--batch must be positive"));
    }
    let c: ModelConfig = a.cfg.resolve(Vec::new())?.model;
    let params = count_params(&c);
    let macs = count_flops_batch(&c, a.batch);
    println!(
        "config: T={} T'={} C={} H={} W={} d={} de={} p={} O={} k=({}, {}) dilation={}",
        c.t_in,
        c.t_out,
        c.channels,
        c.height,
        c.width,
        c.hidden,
        c.depth,
        c.patch,
        c.overlap,
        c.kernel_local,
        c.kernel_global,
        c.dilation
    );
    let g = c.encoder();
    println!("encoder: kernel {} stride {} padding {}", g.kernel, g.stride, g.padding);
    println!("params: {params} ({:.2}M)", params as f64 / 1e6);
    println!("macs: {macs} ({:.2}G) for batch {}", macs as f64 / 1e9, a.batch);
    println!();
    println!("{:<32} {:<14} {:>12} {:>16}  output", "layer", "kind", "params", "macs");
    for l in layer_table(&c) {
        println!(
            "{:<32} {:<14} {:>12} {:>16}  {}x{}x{}",
            l.name,
            l.kind,
            l.params,
            l.macs * a.batch as u64,
            l.output[0],
            l.output[1],
            l.output[2]
        );
    }
    println!();
    println!("receptive field after each block (patches / pixels):");
    for b in 1..=c.depth {
        println!("  block {:>2}: {} / {}", b - 1, receptive_field_patches(&c, b), receptive_field_pixels(&c, b));
    }
    if !a.no_enumerate {
        let enumerated = Model::<f32>::zeroed(c)?.num_parameters();
        let verdict = if enumerated == params { "ok" } else { "MISMATCH" };
        println!();
        println!("enumeration check: closed form {params}, enumerated {enumerated}: {verdict}");
        if enumerated != params {
            anyhow::bail!("closed-form parameter count disagrees with enumeration");
        }
    }
    Ok(())
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("STLIGHT_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| usage(format!("STLIGHT_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("configuring the thread pool")?;
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::NonFiniteLoss { .. } => 3,
                Error::Config(_) | Error::InvalidArgument(_) => 1,
                _ => 2,
            };
        }
    }
    2
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = configure_threads().and_then(|()| match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Predict(a) => run_predict(a),
        Command::Inspect(a) => inspect(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
