use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ssta_core::data::{generate_dataset, read_split, split_dir, DomainShiftSpec, SceneSpec};
use ssta_core::eval::evaluate;
use ssta_core::train::{export_cam, load_checkpoint, train, TrainConfig, TrainData, TrainMode};
use ssta_core::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "ssta", version, about = "Token-aligned detection transformer on synthetic shape domains")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render source and shifted target splits.
    GenerateData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 800)]
        num_train: usize,
        #[arg(long, default_value_t = 200)]
        num_val: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Domain shift preset for the target domain (`fog` or `none`).
        #[arg(long, default_value = "fog")]
        shift: String,
    },
    /// Train a detector; flags override the config file.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Print the mAP report of a checkpoint on one split as JSON.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
        #[arg(long, default_value = "target")]
        domain: String,
    },
    /// Write the averaged cross-attention map of one image.
    ExportCam {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidInput(_) => 1,
        Error::Io { .. } | Error::Parse { .. } | Error::Generation(_) | Error::Load(_) | Error::Json(_) => 2,
        Error::Numerical(_) | Error::Tensor(_) => 3,
    }
}

fn one_of(value: &str, allowed: &[&str], what: &str) -> Result<()> {
    if allowed.contains(&value) {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} must be one of {allowed:?}, got '{value}'")))
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenerateData {
            out,
            num_train,
            num_val,
            seed,
            shift,
        } => {
            let shift = DomainShiftSpec::preset(&shift, seed)?;
            let spec = SceneSpec {
                seed,
                ..SceneSpec::default()
            };
            generate_dataset(&out, &spec, num_train, num_val, shift.as_ref())?;
            log::info!("wrote {num_train}+{num_val} images per domain to {}", out.display());
        }
        Command::Train {
            config,
            data,
            out,
            mode,
            seed,
            lambda,
            epochs,
        } => {
            let mut cfg = match config {
                Some(path) => TrainConfig::load(&path)?,
                None => TrainConfig::default(),
            };
            if let Some(m) = mode {
                cfg.mode = m.parse::<TrainMode>()?;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(l) = lambda {
                cfg.lambda = l;
            }
            if let Some(e) = epochs {
                cfg.epochs = e;
                cfg.warmup_epochs = cfg.warmup_epochs.min(e);
            }
            cfg.validate()?;
            let data = TrainData::load(&data)?;
            let (_, report) = train(&cfg, &data, Some(&out))?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Evaluate {
            checkpoint,
            data,
            split,
            domain,
        } => {
            one_of(&split, &["train", "val"], "split")?;
            one_of(&domain, &["source", "target"], "domain")?;
            let (detector, _) = load_checkpoint(&checkpoint)?;
            let split = read_split(&split_dir(&data, &domain, &split))?;
            let report = evaluate(&detector, &split)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::ExportCam { checkpoint, image, out } => {
            let export = export_cam(&checkpoint, &image, &out)?;
            log::info!(
                "wrote {}x{} map to {}",
                export.grid_shape.0,
                export.grid_shape.1,
                out.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
