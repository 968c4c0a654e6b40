//! Command-line driver: configuration files, data selection and the
//! `train`, `evaluate`, `decode`, `info` and `inspect` commands.

pub mod commands;
pub mod config;
pub mod corpus;
pub mod error;

use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use commands::Decoder;
use config::RunConfig;
use corpus::Split;
pub use error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "srf", version, about = "Train and run capsule sequence routing models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Run configuration (JSON).
    pub config: PathBuf,
    /// Override a scalar field, e.g. `--set train.epochs=3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    pub fn load(&self) -> Result<RunConfig> {
        RunConfig::load(&self.config, &self.overrides)
    }
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Configured split to use when no feature file is given.
    #[arg(long, value_enum, default_value = "test")]
    pub split: Split,
    /// Feature file to use instead of a configured split.
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// Transcripts for `--features`.
    #[arg(long, requires = "features")]
    pub transcripts: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DecoderArgs {
    /// Prefix beam width; defaults to the configured `beam`.
    #[arg(long, conflicts_with = "greedy")]
    pub beam: Option<usize>,
    /// Best-path decoding.
    #[arg(long)]
    pub greedy: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write checkpoints and loss curves.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Continue from an epoch checkpoint of the same run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Report error rates, decode time and real-time factor.
    Evaluate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// Prefix beam width; best-path decoding when absent.
        #[arg(long)]
        beam: Option<usize>,
    },
    /// Print `id<TAB>symbols` for every utterance.
    Decode {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        decoder: DecoderArgs,
    },
    /// Print parameter and transformation-matrix counts, receptive field
    /// and look-ahead.
    Info {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Export per-slice coupling heatmaps of one utterance.
    Inspect {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// Utterance id.
        #[arg(long)]
        utterance: String,
        /// Capsule layer, counted from 0.
        #[arg(long)]
        layer: usize,
        /// Output directory; defaults to `<output_dir>/heatmaps`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn beam_width(width: usize) -> Result<Decoder> {
    if width == 0 {
        return Err(CliError::Usage("--beam must be at least 1".into()));
    }
    Ok(Decoder::Beam(width))
}

fn emit(out: &mut dyn Write, text: String) -> Result<()> {
    out.write_all(text.as_bytes())
        .map_err(|e| CliError::io(std::path::Path::new("<stdout>"), e))
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Train { config, resume } => {
            let cfg = config.load()?;
            commands::train(&cfg, resume.as_deref(), out)?;
        }
        Command::Evaluate {
            config,
            checkpoint,
            data,
            beam,
        } => {
            let cfg = config.load()?;
            let decoder = beam.map_or(Ok(Decoder::Greedy), beam_width)?;
            let model = commands::load_model(&cfg, &checkpoint)?;
            let utts = corpus::select(&cfg, data.split, data.features.as_deref(), data.transcripts.as_deref())?;
            if utts.iter().any(|u| u.labels.is_empty()) {
                return Err(CliError::Usage("evaluation needs transcripts for every utterance".into()));
            }
            let report = commands::evaluate(&cfg, &model, &utts, decoder)?;
            commands::print_report(&report, decoder, out)?;
        }
        Command::Decode {
            config,
            checkpoint,
            data,
            decoder,
        } => {
            let cfg = config.load()?;
            let decoder = if decoder.greedy {
                Decoder::Greedy
            } else {
                beam_width(decoder.beam.unwrap_or(cfg.beam))?
            };
            let model = commands::load_model(&cfg, &checkpoint)?;
            let utts = corpus::select(&cfg, data.split, data.features.as_deref(), data.transcripts.as_deref())?;
            commands::decode(&cfg, &model, &utts, decoder, out)?;
        }
        Command::Info { config } => {
            let cfg = config.load()?;
            let info = commands::info(&cfg)?;
            commands::print_info(&cfg, &info, out)?;
        }
        Command::Inspect {
            config,
            checkpoint,
            data,
            utterance,
            layer,
            out: dir,
        } => {
            let cfg = config.load()?;
            if layer >= cfg.model.layers.len() {
                return Err(CliError::Usage(format!(
                    "layer {layer} out of range, the model has {} capsule layers",
                    cfg.model.layers.len()
                )));
            }
            let model = commands::load_model(&cfg, &checkpoint)?;
            let utts = corpus::select(&cfg, data.split, data.features.as_deref(), data.transcripts.as_deref())?;
            let utt = utts
                .iter()
                .find(|u| u.id == utterance)
                .ok_or_else(|| CliError::Usage(format!("no utterance {utterance:?}")))?;
            let dir = dir.unwrap_or_else(|| cfg.output_dir.join("heatmaps"));
            let report = commands::inspect(&cfg, &model, utt, layer, &dir)?;
            emit(
                out,
                format!(
                    "slices: {}\nheatmaps: {}\nsubstitution_rate: {}\n",
                    report.files.len(),
                    dir.display(),
                    report.substitution_rate
                ),
            )?;
        }
    }
    Ok(())
}
