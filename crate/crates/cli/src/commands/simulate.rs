use std::path::Path;

use crate::config::{SignalFormat, SimulateSpec};
use spi_core::forward::acquire_cube;
use spi_core::patterns::PatternSet;
use spi_core::Result;

pub fn run(spec: &SimulateSpec, out: &Path) -> Result<()> {
    let cube = spec.scene.load()?;
    let patterns = PatternSet::load_path(&spec.patterns)?;
    let signals = acquire_cube(&cube, &patterns, &spec.noise, spec.seed)?;
    let ext = match spec.format {
        SignalFormat::Binary => "sig",
        SignalFormat::Text => "txt",
    };
    for signal in &signals {
        let path = out.join(format!("signal_{:03}.{ext}", signal.channel_index));
        match spec.format {
            SignalFormat::Binary => signal.save_binary_path(&path)?,
            SignalFormat::Text => signal.save_text_path(&path)?,
        }
    }
    println!(
        "simulate: {} channel(s) x {} samples -> {}{}signal_*.{ext}",
        signals.len(),
        patterns.m(),
        out.display(),
        std::path::MAIN_SEPARATOR,
    );
    Ok(())
}
