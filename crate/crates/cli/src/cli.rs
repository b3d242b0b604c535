//! Argument parsing and dispatch.

use std::io::Write;
use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use puie_core::ReferencePolicy;

use crate::commands;
use crate::config::{CliConfig, EnhanceMode};
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "puie", version, about = "Probabilistic underwater image enhancement")]
pub struct Cli {
    /// TOML configuration file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Log more (repeat for debug output).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic raw/reference pairs for smoke tests.
    Synth(SynthArgs),
    /// Build the multi-reference training set from paired images.
    MakeDataset(MakeDatasetArgs),
    /// Train a model and write its checkpoint and loss record.
    Train(TrainArgs),
    /// Sample enhancements or reduce them to one output.
    Enhance(EnhanceArgs),
    /// Compute full-reference metrics between two folders.
    Evaluate(EvaluateArgs),
    /// Print the effective configuration and exit.
    ShowConfig,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub count: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct MakeDatasetArgs {
    /// Folder holding `raw/` and `reference/` with matching file names.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Contrast coefficients as `over,under`.
    #[arg(long, value_delimiter = ',', num_args = 2)]
    pub contrast: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', num_args = 2)]
    pub saturation: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', num_args = 2)]
    pub gamma: Option<Vec<f64>>,
    #[arg(long)]
    pub clip_penalty: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// `uniform_random` or `original_only`.
    #[arg(long)]
    pub reference_policy: Option<ReferencePolicy>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub patch_size: Option<usize>,
    #[arg(long)]
    pub base_channels: Option<usize>,
    #[arg(long)]
    pub latent_dim: Option<usize>,
    #[arg(long)]
    pub depth: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EnhanceArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// An image file or a folder of images.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Number of samples; the MC estimate averages this many.
    #[arg(short, long)]
    pub n: Option<usize>,
    #[arg(long, value_enum)]
    pub mode: Option<EnhanceMode>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Skip the tiled montage in samples mode.
    #[arg(long)]
    pub no_grid: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long = "ref")]
    pub reference: PathBuf,
    /// Suffix after the shared stem in reference file names.
    #[arg(long, default_value = "")]
    pub ref_suffix: String,
    /// Write the CSV report here instead of standard output.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

fn pair(v: &Option<Vec<f64>>, into: &mut [f64; 2]) {
    if let Some(v) = v {
        *into = [v[0], v[1]];
    }
}

fn set<T: Copy>(flag: Option<T>, into: &mut T) {
    if let Some(v) = flag {
        *into = v;
    }
}

impl Cli {
    /// The file configuration with this command's flags applied.
    pub fn effective_config(&self) -> Result<CliConfig, CliError> {
        let mut cfg = CliConfig::load(self.config.as_deref())?;
        match &self.command {
            Command::MakeDataset(a) => {
                pair(&a.contrast, &mut cfg.dataset.contrast);
                pair(&a.saturation, &mut cfg.dataset.saturation);
                pair(&a.gamma, &mut cfg.dataset.gamma);
                set(a.clip_penalty, &mut cfg.dataset.clip_penalty);
            }
            Command::Train(a) => {
                set(a.iterations, &mut cfg.train.iterations);
                set(a.seed, &mut cfg.train.seed);
                set(a.reference_policy, &mut cfg.train.reference_policy);
                set(a.lr, &mut cfg.train.learning_rate);
                set(a.batch_size, &mut cfg.train.batch_size);
                set(a.patch_size, &mut cfg.train.patch_size);
                set(a.base_channels, &mut cfg.network.base_channels);
                set(a.latent_dim, &mut cfg.network.latent_dim);
                set(a.depth, &mut cfg.network.depth);
            }
            Command::Enhance(a) => {
                set(a.n, &mut cfg.enhance.samples);
                set(a.mode, &mut cfg.enhance.mode);
                set(a.seed, &mut cfg.enhance.seed);
                if a.no_grid {
                    cfg.enhance.grid = false;
                }
            }
            Command::Synth(_) | Command::Evaluate(_) | Command::ShowConfig => {}
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Echo the effective configuration to `out`, then run the command.
pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    let cfg = cli.effective_config()?;
    writeln!(out, "# effective configuration")?;
    for line in cfg.to_toml().lines() {
        writeln!(out, "# {line}")?;
    }
    match &cli.command {
        Command::ShowConfig => {}
        Command::Synth(a) => {
            let ids = commands::synth(&a.output, a.count, a.size, a.size, a.seed)?;
            writeln!(out, "wrote {} pairs to {}", ids.len(), a.output.display())?;
        }
        Command::MakeDataset(a) => {
            let m = commands::make_dataset(&a.input, &a.output, &cfg)?;
            writeln!(out, "wrote {} entries to {} ({} skipped)", m.entries.len(), a.output.display(), m.skipped.len())?;
            for s in &m.skipped {
                writeln!(out, "warning: skipped {}: {}", s.file, s.reason)?;
            }
        }
        Command::Train(a) => {
            let files = commands::train(&a.dataset, &a.output, &cfg)?;
            writeln!(out, "checkpoint: {}", files.checkpoint.display())?;
            writeln!(out, "record: {}", files.record.display())?;
        }
        Command::Enhance(a) => {
            for o in commands::enhance(&a.checkpoint, &a.input, &a.output, &cfg)? {
                writeln!(out, "{}: {} -> {}", o.input, o.mode, o.files.join(", "))?;
            }
        }
        Command::Evaluate(a) => {
            let report = commands::evaluate(&a.pred, &a.reference, &a.ref_suffix)?;
            let csv = report.to_csv();
            match &a.output {
                Some(path) => {
                    std::fs::write(path, &csv)?;
                    writeln!(out, "report: {} ({} warnings)", path.display(), report.warnings.len())?;
                }
                None => out.write_all(csv.as_bytes())?,
            }
            for w in &report.warnings {
                writeln!(out, "warning: {w}")?;
            }
        }
    }
    Ok(())
}
