//! Command-line driver: scene generation, training, evaluation, inference,
//! attention export and gradient checks over one declarative configuration.

pub mod commands;
pub mod config;
pub mod dump;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use config::{parse_override, ConfigError, Preset, RunConfig};
use relpose_core::predict::Decoder;

#[derive(Debug, Parser)]
#[command(name = "relpose", version, about = "Two-stage relation network for multi-person pose estimation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write train/val/test scene files.
    Generate(Shared),
    /// Train a model and write its checkpoint and logs.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test scenes.
    Eval(ModelArgs),
    /// Predict poses for every person of a scene file.
    Infer(ModelArgs),
    /// Compare analytic and numeric gradients of the full model in f64.
    Gradcheck(GradcheckArgs),
}

/// Flags understood by every command.
#[derive(Debug, Clone, Default, Args)]
pub struct Shared {
    /// TOML file with configuration keys.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Seed for scene generation, initialisation and batch sampling.
    #[arg(long, value_name = "U64")]
    pub seed: Option<u64>,
    /// Worker threads; results do not depend on it.
    #[arg(long, value_name = "INT")]
    pub workers: Option<usize>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Base values for every key not set elsewhere.
    #[arg(long)]
    pub preset: Option<Preset>,
    /// Any configuration key, as KEY=VALUE. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_override)]
    pub overrides: Vec<(String, toml::Value)>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub shared: Shared,
    /// Optimiser steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Groups per step.
    #[arg(long)]
    pub batch: Option<usize>,
    /// Weight of the relation-stage loss.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Drop the relation stage (the single-stage baseline).
    #[arg(long)]
    pub intra_only: bool,
    /// Keep stage-one parameters fixed.
    #[arg(long)]
    pub freeze_intra: bool,
    /// Warm start from these parameters.
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct ModelArgs {
    #[command(flatten)]
    pub shared: Shared,
    /// Checkpoint to load; defaults to `<out>/model.ckpt`.
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    /// Heatmap decoder.
    #[arg(long)]
    pub decoder: Option<Decoder>,
    /// Write per-group attention tensors next to the predictions.
    #[arg(long)]
    pub dump_attention: bool,
    /// Scene file to run on instead of the configured test split.
    #[arg(long, value_name = "PATH")]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub shared: Shared,
    /// Scale every linear weight gradient by this factor (negative control).
    #[arg(long, hide = true, value_name = "FACTOR")]
    pub inject_bug: Option<f64>,
}

fn value<T: serde::Serialize>(v: T) -> toml::Value {
    toml::Value::try_from(v).expect("scalar flag values serialise to TOML")
}

impl Shared {
    /// Resolves the configuration, with `extra` flag values applied last.
    pub fn resolve(&self, extra: Vec<(String, toml::Value)>) -> Result<RunConfig, ConfigError> {
        let mut overrides = self.overrides.clone();
        let path = |p: &PathBuf| value(p.to_string_lossy().into_owned());
        overrides.extend(self.seed.map(|v| ("seed".into(), value(v))));
        overrides.extend(self.workers.map(|v| ("workers".into(), value(v))));
        overrides.extend(self.out.as_ref().map(|v| ("out".into(), path(v))));
        overrides.extend(extra);
        RunConfig::resolve(self.preset, self.config.as_deref(), &overrides)
    }
}

impl TrainArgs {
    pub fn resolve(&self) -> Result<RunConfig, ConfigError> {
        let mut extra = Vec::new();
        extra.extend(self.steps.map(|v| ("steps".into(), value(v))));
        extra.extend(self.batch.map(|v| ("batch".into(), value(v))));
        extra.extend(self.alpha.map(|v| ("alpha".into(), value(v))));
        if self.intra_only {
            extra.push(("intra_only".into(), value(true)));
        }
        if self.freeze_intra {
            extra.push(("freeze_intra".into(), value(true)));
        }
        extra.extend(self.checkpoint.as_ref().map(|p| ("checkpoint".into(), value(p.to_string_lossy().into_owned()))));
        self.shared.resolve(extra)
    }
}

impl ModelArgs {
    pub fn resolve(&self) -> Result<RunConfig, ConfigError> {
        let mut extra = Vec::new();
        extra.extend(self.checkpoint.as_ref().map(|p| ("checkpoint".into(), value(p.to_string_lossy().into_owned()))));
        extra.extend(self.decoder.map(|d| ("decoder".into(), value(d))));
        if self.dump_attention {
            extra.push(("dump_attention".into(), value(true)));
        }
        extra.extend(self.data.as_ref().map(|p| ("test_data".into(), value(p.to_string_lossy().into_owned()))));
        self.shared.resolve(extra)
    }
}

/// Runs one command. `Ok(false)` signals a failed check that should end the
/// process with a nonzero status.
pub fn run(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Command::Generate(a) => commands::generate(&a.resolve(Vec::new())?).map(|_| true),
        Command::Train(a) => commands::train(&a.resolve()?).map(|_| true),
        Command::Eval(a) => commands::eval(&a.resolve()?).map(|_| true),
        Command::Infer(a) => commands::infer(&a.resolve()?).map(|_| true),
        Command::Gradcheck(a) => commands::gradcheck(&a.shared.resolve(Vec::new())?, a.inject_bug).map(|r| r.passed),
    }
}
