mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::PipelineConfig;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

impl From<handseg::Error> for CliError {
    fn from(e: handseg::Error) -> Self {
        use handseg::Error as E;
        match e {
            E::NonFinite(_) | E::Diverged { .. } => CliError::Numerical(e.to_string()),
            E::InvalidSpec(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(name = "handseg", version, about = "Hand segmentation and fingertip detection on depth images")]
struct Cli {
    #[command(flatten)]
    flags: Flags,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Flags {
    /// Flat key = value config file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Channel width multiplier, as 1/4 or 0.25
    #[arg(long, global = true)]
    width_mult: Option<String>,
    /// Output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Dataset directory written by `synth`
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    /// Detections file (`frame_id x0 y0 x1 y1 score` rows)
    #[arg(long, global = true)]
    detections: Option<PathBuf>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Comma-separated fingertip precision thresholds
    #[arg(long, global = true)]
    thresholds: Option<String>,
    /// Any config key, as KEY=VALUE; may repeat
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset
    Synth,
    /// Train on a dataset's training split
    Train,
    /// Score a checkpoint on a dataset's test split
    Eval,
    /// Segment one 16-bit depth PGM
    Infer {
        frame: PathBuf,
        /// Hand box as x0,y0,x1,y1 (inclusive)
        #[arg(long)]
        bbox: Option<String>,
        /// 8-bit component label PGM to score the prediction against
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Finite-difference check of every layer's gradients
    Gradcheck,
    /// Per-layer parameter counts and the saving from sharing the encoder
    Params,
    /// Inference throughput on synthetic frames
    Bench,
}

fn config(flags: &Flags) -> Result<PipelineConfig, CliError> {
    let mut cfg = match &flags.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    for kv in &flags.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v)?;
    }
    let paths = [("out", &flags.out), ("dataset", &flags.dataset), ("detections", &flags.detections), ("checkpoint", &flags.checkpoint)];
    for (key, value) in paths {
        if let Some(p) = value {
            cfg.set(key, &p.to_string_lossy())?;
        }
    }
    if let Some(s) = flags.seed {
        cfg.seed = Some(s);
    }
    if let Some(w) = &flags.width_mult {
        cfg.set("width_mult", w)?;
    }
    if let Some(t) = &flags.thresholds {
        cfg.set("precision_thresholds", t)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = config(&cli.flags)?;
    match cli.command {
        Command::Synth => commands::synth(&cfg),
        Command::Train => commands::train(&cfg),
        Command::Eval => commands::eval(&cfg),
        Command::Infer { frame, bbox, truth } => commands::infer(&cfg, &frame, bbox.as_deref(), truth.as_deref()),
        Command::Gradcheck => commands::gradcheck(),
        Command::Params => commands::params(&cfg),
        Command::Bench => commands::bench(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("handseg: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
