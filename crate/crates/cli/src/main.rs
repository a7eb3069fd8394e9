//! `unet3p`: parameter accounting, gradient verification, training,
//! evaluation and prediction for the UNet family on synthetic data.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage or configuration
//! error, 3 consistency failure (parameter oracle or checkpoint), 4 non-finite
//! values during training.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use unet3p_core::config::RunConfig;
use unet3p_core::data::Dataset;
use unet3p_core::io::write_tensor;
use unet3p_core::params::{compare_variants, render_key_values, render_table};
use unet3p_core::train::{evaluate, predict, train, EVAL_BATCH};
use unet3p_core::verify::run_suite;
use unet3p_core::{checkpoint, Error, Network, OpKind};

const LOG_FILE: &str = "log.txt";
const CHECKPOINT_DIR: &str = "checkpoint";
const RESOLVED_CONFIG: &str = "config.resolved.txt";

#[derive(Parser)]
#[command(name = "unet3p", version, about = "UNet, UNet++ and UNet 3+ on synthetic segmentation data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Symbolic and enumerated parameter counts for all three variants.
    Paramcount {
        #[command(flatten)]
        run: RunArgs,
        /// Print `variant.key=value` lines instead of the table.
        #[arg(long)]
        key_values: bool,
    },
    /// Finite-difference check of every op, every loss and a tiny network.
    Gradcheck {
        /// Random inputs per check.
        #[arg(long, default_value_t = 10)]
        seeds: usize,
        /// Halve the analytic gradient of one op, to exercise the detector.
        #[arg(long, hide = true, value_name = "OP")]
        inject_fault: Option<String>,
    },
    /// Train on the synthetic set and write log, checkpoint and resolved config.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Dice and false-positive counts of a checkpoint.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        input: InputArgs,
    },
    /// Write a binary PGM mask and a TNS1 probability map per sample.
    Predict {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        input: InputArgs,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Plain-text `key = value` config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    arch_seed: Option<u64>,
    #[arg(long)]
    train_seed: Option<u64>,
    #[arg(long)]
    data_seed: Option<u64>,
}

#[derive(Args)]
struct InputArgs {
    /// Checkpoint directory written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value_t = Split::Heldout)]
    split: Split,
    /// Ignore the classifier gate even when the network has one.
    #[arg(long)]
    no_gate: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Heldout,
}

/// A failed command: message for stderr plus exit code.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Failure { code, message: message.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Checkpoint(_) => 3,
            Error::NonFinite(_) => 4,
            _ => 2,
        };
        Failure::new(code, e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::new(2, format!("{}: {e}", path.display()))
}

fn resolve(run: &RunArgs) -> Result<RunConfig, Failure> {
    let mut cfg = match &run.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(s) = run.arch_seed {
        cfg.arch_seed = s;
    }
    if let Some(s) = run.train_seed {
        cfg.train.seed = s;
    }
    if let Some(s) = run.data_seed {
        cfg.data.seed = s;
    }
    Ok(cfg)
}

fn writable_dir(dir: &Path) -> Outcome {
    fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))?;
    let probe = dir.join(".write-probe");
    fs::write(&probe, b"").map_err(|e| io_failure(dir, e))?;
    fs::remove_file(&probe).map_err(|e| io_failure(dir, e))
}

fn cmd_paramcount(run: &RunArgs, key_values: bool) -> Outcome {
    let cfg = resolve(run)?;
    let reports = compare_variants(&cfg.arch)?;
    if key_values {
        print!("{}", render_key_values(&reports));
    } else {
        print!("{}", render_table(&reports));
    }
    for r in &reports {
        if let Some(row) = r.first_inconsistency() {
            return Err(Failure::new(3, format!("{}: symbolic and enumerated counts differ at {row}", r.spec.variant)));
        }
    }
    Ok(())
}

fn cmd_gradcheck(seeds: usize, inject_fault: Option<&str>) -> Outcome {
    let fault = inject_fault
        .map(|name| OpKind::from_name(name).ok_or_else(|| Failure::new(2, format!("unknown op {name:?}"))))
        .transpose()?;
    let report = run_suite(seeds.max(1), fault)?;
    print!("{}", report.render());
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::new(1, format!("gradient check failed: {}", report.failures().join(", "))))
    }
}

fn cmd_train(run: &RunArgs, out_dir: &Path) -> Outcome {
    let cfg = resolve(run)?;
    writable_dir(out_dir)?;
    let resolved = out_dir.join(RESOLVED_CONFIG);
    fs::write(&resolved, cfg.render()).map_err(|e| io_failure(&resolved, e))?;

    let data = Dataset::generate(&cfg.data)?;
    let mut net = Network::build(&cfg.arch, cfg.arch_seed)?;
    info!(
        "training {} (depth {}, {} images of {}px) for up to {} epochs",
        cfg.arch.variant, cfg.arch.depth, cfg.data.count, cfg.data.image_size, cfg.train.epochs
    );
    let log_path = out_dir.join(LOG_FILE);
    let mut log_file = fs::File::create(&log_path).map_err(|e| io_failure(&log_path, e))?;
    let mut write_err = None;
    let result = train(&mut net, &data, &cfg.train, &cfg.loss, |epoch| {
        info!("{epoch}");
        if let Err(e) = writeln!(log_file, "{epoch}") {
            write_err.get_or_insert(e);
        }
    });
    if let Some(e) = write_err {
        return Err(io_failure(&log_path, e));
    }
    let report = result?;
    checkpoint::save(&net.store, &out_dir.join(CHECKPOINT_DIR))?;

    if let Some(last) = report.epochs.last() {
        println!("{last}");
    }
    if let Some(stop) = &report.stopped_by {
        println!("stopped early after epoch {}", report.epochs.len());
        print!("{stop}");
    }
    Ok(())
}

fn load_network(cfg: &RunConfig, dir: &Path) -> Result<Network, Failure> {
    let mut net = Network::build(&cfg.arch, cfg.arch_seed)?;
    checkpoint::load(&mut net.store, dir)?;
    Ok(net)
}

fn dataset(cfg: &RunConfig, split: Split) -> Result<Dataset, Failure> {
    let spec = match split {
        Split::Train => cfg.data.clone(),
        Split::Heldout => cfg.heldout(),
    };
    Ok(Dataset::generate(&spec)?)
}

fn cmd_eval(run: &RunArgs, input: &InputArgs) -> Outcome {
    let cfg = resolve(run)?;
    let mut net = load_network(&cfg, &input.checkpoint)?;
    let data = dataset(&cfg, input.split)?;
    let ungated = evaluate(&mut net, &data, false)?;
    print!("{ungated}");
    if cfg.arch.cgm && !input.no_gate {
        print!("{}", evaluate(&mut net, &data, true)?);
    }
    Ok(())
}

/// Binary PGM (P5) of `probs` thresholded at 0.5: organ 255, background 0.
fn pgm(probs: &[f64], height: usize, width: usize) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(probs.iter().map(|&p| if p > 0.5 { 255u8 } else { 0 }));
    out
}

fn cmd_predict(run: &RunArgs, input: &InputArgs, out_dir: &Path) -> Outcome {
    let cfg = resolve(run)?;
    let mut net = load_network(&cfg, &input.checkpoint)?;
    let data = dataset(&cfg, input.split)?;
    writable_dir(out_dir)?;
    let all: Vec<usize> = (0..data.len()).collect();
    for idx in all.chunks(EVAL_BATCH) {
        let (x, _, _) = data.batch(idx)?;
        let pred = predict(&mut net, x)?;
        let out = pred.output(!input.no_gate);
        let (h, w) = (out.shape()[2], out.shape()[3]);
        for (k, &i) in idx.iter().enumerate() {
            let map = out.select(k)?;
            let stem = out_dir.join(format!("sample_{i:04}"));
            let pgm_path = stem.with_extension("pgm");
            fs::write(&pgm_path, pgm(map.data(), h, w)).map_err(|e| io_failure(&pgm_path, e))?;
            write_tensor(&stem.with_extension("tns"), &map)?;
        }
    }
    println!("wrote {} masks to {}", data.len(), out_dir.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Paramcount { run, key_values } => cmd_paramcount(run, *key_values),
        Command::Gradcheck { seeds, inject_fault } => cmd_gradcheck(*seeds, inject_fault.as_deref()),
        Command::Train { run, out_dir } => cmd_train(run, out_dir),
        Command::Eval { run, input } => cmd_eval(run, input),
        Command::Predict { run, input, out_dir } => cmd_predict(run, input, out_dir),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
