//! Subcommand implementations.
//!
//! Each `run` takes a validated spec from [`crate::config`], writes its
//! outputs under the given directory, and prints a one-line summary per
//! artifact. [`execute`] is the single entry point shared by fresh runs and
//! `--config` replays, so both paths behave identically.

pub mod cube;
mod metrics;
mod patterns;
mod reconstruct;
mod simulate;
mod sweep;

use std::fs;
use std::path::Path;

use crate::config::ExperimentConfig;
use spi_core::Result;

/// Runs one experiment and records it as `config.json` next to the outputs.
pub fn execute(config: &ExperimentConfig, out: &Path, jobs: usize) -> Result<()> {
    fs::create_dir_all(out)?;
    match config {
        ExperimentConfig::Patterns(spec) => patterns::run(spec, out)?,
        ExperimentConfig::Simulate(spec) => simulate::run(spec, out)?,
        ExperimentConfig::Reconstruct(spec) => reconstruct::run(spec, out, jobs)?,
        ExperimentConfig::Sweep(spec) => sweep::run(spec, out, jobs)?,
        ExperimentConfig::Metrics(spec) => metrics::run(spec, out)?,
        ExperimentConfig::CubeSynth(spec) => cube::synth(spec, out)?,
    }
    let path = out.join("config.json");
    fs::write(&path, config.to_json()?)?;
    println!("recorded {}", path.display());
    Ok(())
}
