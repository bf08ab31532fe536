use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::config::MetricsSpec;
use spi_core::cube::SpectralCube;
use spi_core::metrics::{quality, QualityReport};
use spi_core::{Error, Result};

#[derive(Serialize)]
struct Report {
    peak: f64,
    rows: Vec<Row>,
}

#[derive(Serialize)]
struct Row {
    channel: usize,
    wavelength: f64,
    #[serde(flatten)]
    quality: QualityReport,
}

pub fn run(spec: &MetricsSpec, out: &Path) -> Result<()> {
    let image = SpectralCube::load_path(&spec.image)?;
    let reference = spec.reference.load()?;
    if image.n() != reference.n() || image.channels() != reference.channels() {
        return Err(Error::ShapeMismatch {
            op: "metrics",
            detail: format!(
                "image is {}x{} with {} channel(s), reference is {}x{} with {}",
                image.n(),
                image.n(),
                image.channels(),
                reference.n(),
                reference.n(),
                reference.channels()
            ),
        });
    }
    let rows = (0..image.channels())
        .map(|c| {
            Ok(Row {
                channel: c,
                wavelength: image.wavelengths()[c],
                quality: quality(image.plane(c), reference.plane(c), spec.peak)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let report = Report { peak: spec.peak, rows };
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    let path = out.join("report.json");
    fs::write(&path, &text)?;
    print!("{text}");
    Ok(())
}
