//! Subcommands of the `vidshed` executable, exposed as a library so tests
//! can drive them without spawning processes.

// `!(x > 0.0)` is used deliberately so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::fmt;
use std::path::Path;

use clap::{Parser, Subcommand};

pub mod manifest;
pub mod report;
pub mod run;
pub mod sweep;
pub mod synth;
pub mod train;

pub use manifest::{Baseline, RunManifest, MANIFEST_VERSION};

/// Exit status for success.
pub const EXIT_OK: i32 = 0;
/// Exit status for failures not caused by the caller's inputs.
pub const EXIT_RUNTIME: i32 = 1;
/// Exit status for invalid inputs, configuration or datasets.
pub const EXIT_USAGE: i32 = 2;

/// An error caused by the caller's inputs.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Maps an error chain to the process exit status.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.is::<UsageError>()
            || cause.is::<toml::de::Error>()
            || cause.is::<serde_json::Error>()
            || cause.is::<clap::Error>()
        {
            return EXIT_USAGE;
        }
        if let Some(e) = cause.downcast_ref::<vidshed::Error>() {
            return if e.is_usage() { EXIT_USAGE } else { EXIT_RUNTIME };
        }
    }
    EXIT_RUNTIME
}

/// Reads an input file; a missing or unreadable input is a usage error.
pub(crate) fn read_input(path: &Path) -> anyhow::Result<String> {
    std::fs::read_to_string(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))
}

pub(crate) fn load_frames(path: &Path) -> anyhow::Result<Vec<vidshed::sim::FrameRecord>> {
    if !path.is_file() {
        return Err(usage(format!("dataset {} not found", path.display())));
    }
    vidshed::sim::load_dataset(path).map_err(|e| anyhow::Error::new(e).context(format!("loading {}", path.display())))
}

pub(crate) fn load_model(path: &Path) -> anyhow::Result<vidshed::UtilityModel> {
    let text = read_input(path)?;
    vidshed::UtilityModel::from_json(&text)
        .map_err(|e| anyhow::Error::new(e).context(format!("loading model {}", path.display())))
}

pub(crate) fn write_file(path: &Path, contents: &str) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, contents).map_err(|e| anyhow::anyhow!("writing {}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "vidshed", version, about = "Utility-aware load shedding for video analytics")]
pub struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a utility model from a labeled frame-feature dataset.
    Train(train::TrainArgs),
    /// Generate a synthetic scenario or labeled corpus.
    Synth(synth::SynthArgs),
    /// Simulate the pipeline with the load shedder.
    Run(run::RunArgs),
    /// Sweep thresholds or drop rates offline, or cross-validate.
    Sweep(sweep::SweepArgs),
    /// Merge several run directories into comparison tables.
    Report(report::ReportArgs),
}

pub fn dispatch(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train(a) => train::cmd_train(&a).map(drop),
        Command::Synth(a) => synth::cmd_synth(&a).map(drop),
        Command::Run(a) => run::cmd_run(&a).map(drop),
        Command::Sweep(a) => sweep::cmd_sweep(&a).map(drop),
        Command::Report(a) => report::cmd_report(&a).map(drop),
    }
}
