//! `crossx`: train, evaluate, ablate, verify and export activation maps.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crossx_core::ablation::{self, AblationPlan};
use crossx_core::cam;
use crossx_core::checkpoint::Checkpoint;
use crossx_core::config::{self, CrossXConfig, Variant};
use crossx_core::data;
use crossx_core::train::{self, EpochMetrics, TrainOptions, TrainState};
use crossx_core::verify::{self, Faults};
use crossx_core::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_NUMERICAL: u8 = 2;
const EXIT_VERIFY: u8 = 3;
const THREADS_ENV: &str = "CROSSX_THREADS";

#[derive(Parser)]
#[command(name = "crossx", version, about = "Cross-X learning on a desk-scale synthetic benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Config file of `key = value` lines, or a preset name.
    #[arg(long)]
    config: Option<String>,
    /// Override one key; applied after the config file, in order.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write metrics and checkpoints.
    Train(ConfigArgs),
    /// Score a checkpoint on a split of the synthetic data.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// train, val or test.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Run the variant ladder for both pooling modes over several seeds.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 5)]
        seeds: usize,
        /// Comma-separated subset of the ladder.
        #[arg(long)]
        variants: Option<String>,
        /// Comma-separated pooling modes.
        #[arg(long, default_value = "gap,gmp")]
        poolings: String,
    },
    /// Finite-difference checks of every differentiable op and loss.
    Gradcheck {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Brute-force equivalence checks of the fast kernels.
    Oracle {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write activation heatmaps and overlays for a batch of images.
    ExportCam {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// `images.bin` file as written by dataset export.
        #[arg(long)]
        images: PathBuf,
        #[arg(long, default_value = "channel-mean")]
        cam_mode: String,
        /// Export at most this many images.
        #[arg(long)]
        limit: Option<usize>,
    },
}

enum Failure {
    Core(Error),
    Verify(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type CliResult = Result<(), Failure>;

fn load_config(args: &ConfigArgs) -> Result<CrossXConfig, Error> {
    let mut cfg = match &args.config {
        None => CrossXConfig::default(),
        Some(c) if Path::new(c).is_file() => CrossXConfig::from_file(Path::new(c))?,
        Some(c) if config::preset_names().iter().any(|p| p == c) => CrossXConfig::preset(c)?,
        Some(c) => {
            return Err(Error::Config(format!("cannot read config '{c}': no such file or preset")));
        }
    };
    let pairs = args.overrides.iter().map(|o| config::parse_override(o)).collect::<Result<Vec<_>, _>>()?;
    cfg.apply_pairs(&pairs)?;
    Ok(cfg)
}

fn prepare(args: &ConfigArgs) -> Result<CrossXConfig, Error> {
    let cfg = load_config(args)?;
    train::write_effective_config(&cfg, &args.out)?;
    Ok(cfg)
}

fn threads() -> Result<usize, Error> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got '{v}'"))),
        Err(_) => Ok(1),
    }
}

fn cmd_train(args: &ConfigArgs) -> CliResult {
    let cfg = prepare(args)?;
    let mut report = |m: &EpochMetrics| {
        eprintln!(
            "epoch {:>3}  lr {:<8}  loss {:>9.5}  train {:.3}  val {:.3}",
            m.epoch, m.lr, m.loss_total, m.train_acc, m.val.accuracy
        );
    };
    let outcome = train::train(&cfg, TrainOptions { out_dir: Some(args.out.clone()), on_epoch: Some(&mut report) })?;
    if let Some(best) = outcome.best_val {
        println!("best val accuracy {best}");
    }
    Ok(())
}

fn cmd_eval(args: &ConfigArgs, checkpoint: &Path, split: &str) -> CliResult {
    let cfg = prepare(args)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let mut state = TrainState::from_checkpoint(&cfg, &ckpt)?;
    let splits = data::synth_dataset(&cfg.data, cfg.seed)?;
    let ds = match split {
        "train" => &splits.train,
        "val" => &splits.val,
        "test" => &splits.test,
        other => return Err(Error::Config(format!("unknown split '{other}' (train, val, test)")).into()),
    };
    let rep = train::evaluate(&mut state.model, ds)?;
    let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    let text = format!(
        "split,count,accuracy,acc_L,acc_Lm1,acc_G,kl_Lm1,kl_G\n{split},{},{},{},{},{},{},{}\n",
        rep.count,
        rep.accuracy,
        opt(rep.head_accuracy[0]),
        opt(rep.head_accuracy[1]),
        opt(rep.head_accuracy[2]),
        opt(rep.kl[0]),
        opt(rep.kl[1]),
    );
    fs::write(args.out.join("eval.csv"), &text).map_err(Error::from)?;
    print!("{text}");
    Ok(())
}

fn parse_list(s: &str) -> Vec<String> {
    s.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect()
}

fn cmd_ablate(args: &ConfigArgs, seeds: usize, variants: Option<&str>, poolings: &str) -> CliResult {
    let cfg = prepare(args)?;
    let mut plan = AblationPlan::full(cfg.seed, seeds);
    if let Some(v) = variants {
        plan.variants = parse_list(v).iter().map(|s| s.parse::<Variant>()).collect::<Result<_, _>>()?;
    }
    plan.poolings = parse_list(poolings);
    for p in &plan.poolings {
        crossx_core::pooling::lookup(p)?;
    }
    let progress = |r: &ablation::AblationRow| {
        eprintln!("{:<14} {:<4} seed {:<3} test {:.4}  ({:.1}s)", r.variant.name(), r.pooling, r.seed, r.test.accuracy, r.seconds);
    };
    let rows = ablation::run_ablation(&cfg, &plan, threads()?, Some(args.out.join("runs")), &progress)?;
    fs::write(args.out.join("ablation.csv"), ablation::ablation_csv(&rows)).map_err(Error::from)?;
    for v in &plan.variants {
        if let Some(m) = ablation::mean_accuracy(&rows, *v) {
            println!("{:<14} mean test accuracy {m:.4}", v.name());
        }
    }
    Ok(())
}

fn cmd_verify(suite: &crossx_core::registry::Registry<dyn verify::Check>, out: Option<&Path>) -> CliResult {
    let faults = Faults::from_env()?;
    let results = verify::run_suite(suite, faults);
    let table = verify::format_table(&results);
    print!("{table}");
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(Error::from)?;
        fs::write(dir.join("report.txt"), &table).map_err(Error::from)?;
    }
    let failed: Vec<String> = results
        .iter()
        .filter(|r| !r.passed())
        .map(|r| format!("{} (max error {:.3e})", r.name, r.max_error))
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Verify(format!("failed checks: {}", failed.join(", "))))
    }
}

fn cmd_export_cam(args: &ConfigArgs, checkpoint: &Path, images: &Path, mode: &str, limit: Option<usize>) -> CliResult {
    let cfg = prepare(args)?;
    let strategy = cam::lookup(mode)?;
    let ckpt = Checkpoint::load(checkpoint)
        .map_err(|e| Error::Config(format!("cannot load checkpoint '{}': {e}", checkpoint.display())))?;
    let mut state = TrainState::from_checkpoint(&cfg, &ckpt)?;
    let mut x = data::read_images(images)?;
    if let Some(n) = limit {
        let n = n.min(x.shape()[0]);
        x = x.slice_rows(0, n)?;
    }
    let files = cam::export_cams(&mut state.model, &x, strategy.as_ref(), &args.out)?;
    println!("wrote {} files to {}", files.len(), args.out.display());
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Train(args) => cmd_train(&args),
        Command::Eval { cfg, checkpoint, split } => cmd_eval(&cfg, &checkpoint, &split),
        Command::Ablate { cfg, seeds, variants, poolings } => cmd_ablate(&cfg, seeds, variants.as_deref(), &poolings),
        Command::Gradcheck { out } => cmd_verify(verify::gradcheck_suite(), out.as_deref()),
        Command::Oracle { out } => cmd_verify(verify::oracle_suite(), out.as_deref()),
        Command::ExportCam { cfg, checkpoint, images, cam_mode, limit } => {
            cmd_export_cam(&cfg, &checkpoint, &images, &cam_mode, limit)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Verify(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_VERIFY)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            match e {
                Error::Numerical(_) => ExitCode::from(EXIT_NUMERICAL),
                _ => ExitCode::from(EXIT_USAGE),
            }
        }
    }
}
