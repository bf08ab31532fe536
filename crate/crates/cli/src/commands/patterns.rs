use std::path::Path;

use crate::config::PatternsSpec;
use spi_core::patterns::PatternSet;
use spi_core::Result;

pub fn run(spec: &PatternsSpec, out: &Path) -> Result<()> {
    let set = PatternSet::generate(spec.n, spec.sr, spec.ordering)?;
    let path = out.join("patterns.bin");
    set.save_path(&path)?;
    println!(
        "patterns: n={} m={} ordering={} -> {}",
        set.n(),
        set.m(),
        spec.ordering,
        path.display()
    );
    Ok(())
}
