mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// A bad flag or configuration value (exit 2).
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

/// Unusable input data (exit 3).
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct DataError(pub String);

pub const OUT_ROOT_ENV: &str = "STFM_OUT_ROOT";

#[derive(Parser, Debug)]
#[command(name = "stfm", version, about = "Speaking and talking-face generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Overrides {
    /// TOML configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dotted configuration override, e.g. `train.lr=1e-3`; repeatable.
    #[arg(long = "set", value_parser = config::parse_override)]
    pub set: Vec<(String, toml::Value)>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Turn raw clips into a training-ready dataset.
    Preprocess {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "desk")]
        preset: String,
    },
    /// Write a procedural talking-face dataset.
    SynthData {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "desk")]
        preset: String,
    },
    /// Train a model on a preprocessed dataset.
    Train(commands::TrainArgs),
    /// Generate speech and a talking-face clip from one image, a reference voice and text.
    Generate(commands::GenerateArgs),
    /// Score generated clips against ground truth.
    Evaluate {
        #[arg(long)]
        gen: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Report path; CSV and text tables are written next to it.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Preset used when the ground truth has no manifest.
        #[arg(long, default_value = "desk")]
        preset: String,
    },
    /// Train and score every cell of an ablation grid.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        grid: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long = "set", value_parser = config::parse_override)]
        set: Vec<(String, toml::Value)>,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Preprocess { input, out, preset } => {
            commands::preprocess(&input, &commands::out_dir(out, "preprocess")?, &preset)
        }
        Command::SynthData { n, seed, out, preset } => {
            commands::synth_data(n, seed, &commands::out_dir(out, "synth-data")?, &preset)
        }
        Command::Train(args) => commands::train(args),
        Command::Generate(args) => commands::generate(args),
        Command::Evaluate { gen, gt, out, preset } => {
            let out = match out {
                Some(p) => p,
                None => commands::out_dir(None, "evaluate")?.join("report.json"),
            };
            commands::evaluate(&gen, &gt, &out, &preset)
        }
        Command::Ablate { data, grid, out, set } => {
            commands::ablate(&data, grid.as_deref(), &commands::out_dir(out, "ablate")?, &set)
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use stfm_core::Error as E;
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 2;
        }
        if cause.is::<DataError>() {
            return 3;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::NumericAbort { .. } | E::NonFinite(_) => 4,
                E::Io { .. } => 5,
                _ => 3,
            };
        }
        if cause.is::<std::io::Error>() {
            return 5;
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn errors_map_to_documented_exit_codes() {
        let usage = anyhow::Error::new(UsageError("x".into()));
        assert_eq!(exit_code(&usage), 2);
        let data = anyhow::Error::new(stfm_core::Error::Media("bad".into()));
        assert_eq!(exit_code(&data), 3);
        let abort = anyhow::Error::new(stfm_core::Error::NumericAbort {
            step: 3,
            l_video: f64::NAN,
            l_audio: 1.0,
            grad_norm: 1.0,
        });
        assert_eq!(exit_code(&abort.context("training")), 4);
        let io = anyhow::Error::new(std::io::Error::other("disk"));
        assert_eq!(exit_code(&io), 5);
    }
}
