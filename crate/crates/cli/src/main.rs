use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lsla_core::accounting::{cost_report, paper_target, CONVENTION};
use lsla_core::attention::{BiasParamMode, Variant};
use lsla_core::harness::{
    evaluate, ingest, ingest_with_classes, log_csv, nearest_centroid_accuracy, synth_dataset, train_with_progress,
    Dataset, SynthConfig, TrainConfig,
};
use lsla_core::model::{load_checkpoint, save_checkpoint, ModelConfig};
use lsla_core::numcore::rng::{seeded, uniform_tensor};
use lsla_core::numcore::Tensor;
use lsla_core::verify::{self, Context, Hooks};
use lsla_core::LslaError;

const OK: u8 = 0;
const FAILED: u8 = 1;
const USAGE: u8 = 2;
const IO: u8 = 3;

#[derive(Parser)]
#[command(name = "lsla", version, about = "Cost reports, property checks, training and inspection for LSLA models")]
struct Cli {
    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parameter and FLOP breakdown of a configuration.
    Report(ReportArgs),
    /// Run the registered property checks.
    Verify(VerifyArgs),
    /// Train a fresh model on `<data>/train`, evaluating on `<data>/eval`.
    Train(TrainArgs),
    /// Top-1 accuracy of a checkpoint.
    Eval(EvalArgs),
    /// Dump the attention profile of one query.
    Inspect(InspectArgs),
    /// Write the synthetic grating dataset.
    Synth(SynthArgs),
}

#[derive(Args)]
struct ReportArgs {
    /// Preset name or path to a key=value config file.
    #[arg(long)]
    config: String,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    no_projection: bool,
    #[arg(long)]
    bias_mode: Option<BiasParamMode>,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Glob over property names, e.g. `equivalence*`.
    #[arg(long)]
    filter: Option<String>,
    #[arg(long, hide = true)]
    skew_fuse_vo: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset root; its `eval` split is used when present.
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    stage: usize,
    #[arg(long)]
    block: usize,
    #[arg(long)]
    window: usize,
    #[arg(long)]
    query: usize,
    #[arg(long)]
    head: usize,
    #[arg(long)]
    out: PathBuf,
    /// Take the first image of this dataset instead of a random probe.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 128)]
    per_class: usize,
    #[arg(long, default_value_t = 56)]
    size: usize,
}

struct Failure {
    code: u8,
    message: String,
}

impl From<LslaError> for Failure {
    fn from(e: LslaError) -> Self {
        let code = match &e {
            LslaError::Config(_)
            | LslaError::Shape(_)
            | LslaError::IndexOutOfRange(_)
            | LslaError::LabelOutOfRange { .. } => USAGE,
            LslaError::Io(_) | LslaError::MissingFile(_) | LslaError::Format { .. } | LslaError::Checksum { .. } => IO,
            _ => FAILED,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure {
            code: IO,
            message: e.to_string(),
        }
    }
}

type Outcome = Result<u8, Failure>;

fn write_file(path: &Path, contents: &str) -> Result<(), Failure> {
    fs::write(path, contents).map_err(|e| Failure {
        code: IO,
        message: format!("{}: {e}", path.display()),
    })
}

/// A preset name, or a config file when `spec` names an existing file.
fn resolve_config(spec: &str) -> Result<(ModelConfig, Option<String>), Failure> {
    let path = Path::new(spec);
    if path.is_file() {
        let text = fs::read_to_string(path)?;
        let preset = text
            .lines()
            .find_map(|l| l.trim().strip_prefix("preset="))
            .map(|p| p.trim().to_string());
        return Ok((ModelConfig::from_text(&text)?, preset));
    }
    Ok((ModelConfig::preset(spec)?, Some(spec.to_string())))
}

fn report(a: ReportArgs) -> Outcome {
    let (mut cfg, preset) = resolve_config(&a.config)?;
    if let Some(v) = a.variant {
        cfg.attention.variant = v;
    }
    if a.no_projection {
        cfg.attention.final_projection = false;
    }
    if let Some(m) = a.bias_mode {
        cfg.attention.bias_mode = m;
    }
    let r = cost_report(&cfg)?;
    print!("{}", r.to_table());
    println!("params {:.3}M  flops {:.3}G at {}x{}", r.total_params as f64 / 1e6, r.total_flops as f64 / 1e9, cfg.image_size, cfg.image_size);
    println!("convention: {CONVENTION}");
    let mut code = OK;
    if let Some(t) = preset.as_deref().and_then(|p| paper_target(p, &cfg.attention)) {
        let (dp, df) = t.deviation(&r);
        let within = dp.abs() <= 0.05 && df.abs() <= 0.05;
        println!(
            "target {}: {}M / {}G, deviation params {:+.2}% flops {:+.2}% [{}]",
            t.label,
            t.params_m,
            t.flops_g,
            100.0 * dp,
            100.0 * df,
            if within { "within 5%" } else { "OUTSIDE 5%" }
        );
        if !within {
            code = FAILED;
        }
    }
    if let Some(path) = a.csv {
        write_file(&path, &r.to_csv())?;
    }
    Ok(code)
}

fn run_verify(a: VerifyArgs, seed: u64) -> Outcome {
    let ctx = Context {
        seed,
        hooks: Hooks {
            skew_fuse_vo: a.skew_fuse_vo,
        },
    };
    let outcomes = verify::run(a.filter.as_deref(), &ctx);
    if outcomes.is_empty() {
        return Err(Failure {
            code: USAGE,
            message: format!("no property matches `{}`", a.filter.unwrap_or_default()),
        });
    }
    for o in &outcomes {
        println!("{} {}: {}", if o.passed { "PASS" } else { "FAIL" }, o.name, o.detail);
    }
    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.passed).map(|o| o.name).collect();
    if failed.is_empty() {
        println!("{} properties passed", outcomes.len());
        Ok(OK)
    } else {
        println!("{} of {} properties failed: {}", failed.len(), outcomes.len(), failed.join(", "));
        Ok(FAILED)
    }
}

/// `root/<split>` when it holds a manifest, otherwise `root` itself.
fn split_dir(root: &Path, split: &str) -> PathBuf {
    let sub = root.join(split);
    if sub.join(lsla_core::harness::MANIFEST).is_file() {
        sub
    } else {
        root.to_path_buf()
    }
}

fn run_train(a: TrainArgs, seed: u64) -> Outcome {
    let (cfg, _) = resolve_config(&a.config)?;
    let classes = Some(cfg.num_classes);
    let train_set = ingest_with_classes(a.data.join("train"), classes)?;
    let eval_set = ingest_with_classes(a.data.join("eval"), classes)?;
    let defaults = TrainConfig::with_epochs(a.epochs);
    let tc = TrainConfig {
        seed,
        base_lr: a.lr.unwrap_or(defaults.base_lr),
        batch_size: a.batch_size.unwrap_or(defaults.batch_size),
        ..defaults
    };
    let out = train_with_progress(&cfg, &tc, &train_set, &eval_set, |r| {
        eprintln!("epoch {:3}  loss {:.5}  eval top-1 {:.4}  lr {:.3e}", r.epoch, r.train_loss, r.eval_top1, r.lr);
    })?;
    save_checkpoint(&out.model, &a.out)?;
    if let Some(log) = &a.log {
        write_file(log, &log_csv(&out.log))?;
    }
    let last = out.log.last().expect("at least one epoch");
    println!("eval top-1 {:.4} after {} epochs; checkpoint {}", last.eval_top1, last.epoch, a.out.display());
    Ok(OK)
}

fn run_eval(a: EvalArgs) -> Outcome {
    let model = load_checkpoint(&a.ckpt)?;
    let data = ingest(split_dir(&a.data, "eval"))?;
    println!("{:.4}", evaluate(&model, &data)?);
    Ok(OK)
}

fn probe_image(data: Option<&Path>, cfg: &ModelConfig, seed: u64) -> Result<Tensor, Failure> {
    match data {
        Some(root) => {
            let ds: Dataset = ingest(split_dir(root, "eval"))?;
            Ok(ds.batch(&[0])?.0)
        }
        None => Ok(uniform_tensor(&mut seeded(seed), &[1, cfg.image_size, cfg.image_size, cfg.in_channels], 0.0, 1.0)),
    }
}

fn run_inspect(a: InspectArgs, seed: u64) -> Outcome {
    let model = load_checkpoint(&a.ckpt)?;
    let image = probe_image(a.data.as_deref(), &model.config, seed)?;
    let p = model.inspect(&image, a.stage, a.block, a.window, a.query, a.head)?;
    write_file(&a.out, &p.to_csv())?;
    println!(
        "query {} self weight: attn_pre {:.6} attn_post {:.6}; wrote {}",
        a.query,
        p.attn_pre[a.query],
        p.attn_post[a.query],
        a.out.display()
    );
    Ok(OK)
}

fn run_synth(a: SynthArgs, seed: u64) -> Outcome {
    let cfg = SynthConfig::new(a.classes, a.per_class, a.size, seed);
    let (train, eval) = synth_dataset(&a.out, &cfg)?;
    let baseline = nearest_centroid_accuracy(&train, &eval)?;
    println!(
        "wrote {} train and {} eval images to {}; nearest-centroid baseline {baseline:.4}",
        train.len(),
        eval.len(),
        a.out.display()
    );
    Ok(OK)
}

/// Work is sequential; the variable is still validated so a typo is not
/// silently ignored.
fn check_threads() -> Result<(), Failure> {
    match std::env::var("LSLA_NUM_THREADS") {
        Ok(v) if v.trim().parse::<usize>().map_or(true, |n| n == 0) => Err(Failure {
            code: USAGE,
            message: format!("LSLA_NUM_THREADS must be a positive integer, got `{v}`"),
        }),
        _ => Ok(()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let seed = cli.seed;
    let result = check_threads().and_then(|_| match cli.command {
        Command::Report(a) => report(a),
        Command::Verify(a) => run_verify(a, seed),
        Command::Train(a) => run_train(a, seed),
        Command::Eval(a) => run_eval(a),
        Command::Inspect(a) => run_inspect(a, seed),
        Command::Synth(a) => run_synth(a, seed),
    });
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
