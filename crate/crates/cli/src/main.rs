//! `lupi`: generate synthetic data, train, evaluate, and measure domain shift.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use lupi_core::Modality;

#[derive(Parser)]
#[command(name = "lupi", version, about = "Visible-infrared re-identification with a privileged intermediate domain")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Shot {
    Single,
    Multi,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (train/ and test/ with manifests).
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train on DATA/train and write a checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// JSON-lines training log.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on DATA/test; prints the report as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Defaults come from the config stored in the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_parser = parse_modality)]
        query_mod: Option<Modality>,
        #[arg(long, value_parser = parse_modality)]
        gallery_mod: Option<Modality>,
        #[arg(long)]
        shot: Option<Shot>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        exclude_same_camera: bool,
    },
    /// Train and evaluate the full mode x loss-toggle grid; writes CSV.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// MMD between two modalities, on features or (without a checkpoint) raw pixels.
    Mmd {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Pair of modalities, e.g. `V,I`, `V,Z` or `I,Z`.
        #[arg(long, value_parser = parse_pair)]
        between: (Modality, Modality),
        /// Comma-separated kernel bandwidths; median heuristic when omitted.
        #[arg(long, value_delimiter = ',')]
        bandwidths: Vec<f64>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Cross-modal cosine distance histograms of DATA/test as CSV.
    Hist {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_modality(s: &str) -> Result<Modality, String> {
    s.parse().map_err(|e| format!("{e}"))
}

fn parse_pair(s: &str) -> Result<(Modality, Modality), String> {
    let (a, b) = s.split_once(',').ok_or_else(|| format!("expected two modalities like V,I, got {s:?}"))?;
    let pair = (parse_modality(a.trim())?, parse_modality(b.trim())?);
    if pair.0 == pair.1 {
        return Err(format!("modalities must differ, got {s:?}"));
    }
    Ok(pair)
}

fn init_logging() {
    let level = std::env::var("LUPI_LOG_LEVEL").unwrap_or_else(|_| "info".into());
    env_logger::Builder::new()
        .parse_filters(&level)
        .format_timestamp(None)
        .init();
}

fn run(cli: Cli) -> anyhow::Result<()> {
    use commands::*;
    match cli.command {
        Command::Generate { config, out_dir } => generate(config.as_deref(), &out_dir),
        Command::Train { config, data, out, log } => train(config.as_deref(), &data, &out, log.as_deref()),
        Command::Eval {
            checkpoint,
            data,
            config,
            query_mod,
            gallery_mod,
            shot,
            trials,
            exclude_same_camera,
        } => {
            let overrides = EvalOverrides {
                query_mod,
                gallery_mod,
                shot,
                trials,
                exclude_same_camera,
            };
            eval(&checkpoint, &data, config.as_deref(), &overrides)
        }
        Command::Ablate { config, data, out } => ablate(config.as_deref(), &data, &out),
        Command::Mmd {
            data,
            checkpoint,
            config,
            between,
            bandwidths,
            split,
        } => mmd(&data, checkpoint.as_deref(), config.as_deref(), between, &bandwidths, split),
        Command::Hist { checkpoint, data, out } => hist(&checkpoint, &data, &out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("{}", first.trim());
            return ExitCode::from(1);
        }
    };
    init_logging();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::from(1)
        }
    }
}
