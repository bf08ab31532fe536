use std::path::Path;

use serde::Serialize;

use crate::config::CubeSynthSpec;
use spi_core::cube::{synth_cube, SpectralCube};
use spi_core::fixtures;
use spi_core::{Error, Result};

pub fn synth(spec: &CubeSynthSpec, out: &Path) -> Result<()> {
    if spec.channels == 0 {
        return Err(Error::InvalidArgument("channels must be at least 1".into()));
    }
    let base = spec.base.plane(spec.n);
    let wavelengths = fixtures::spectral_grid(spec.channels);
    let cube = synth_cube(&base, spec.n, &wavelengths, spec.profile.transmission())?;
    let path = out.join("cube.bin");
    cube.save_path(&path)?;
    println!(
        "cube: {} {}x{}, {} channel(s) at {:.0}-{:.0} nm -> {}",
        spec.base,
        spec.n,
        spec.n,
        cube.channels(),
        wavelengths[0],
        wavelengths[wavelengths.len() - 1],
        path.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct ChannelInfo {
    channel: usize,
    wavelength: f64,
    min: f64,
    max: f64,
    mean: f64,
}

#[derive(Serialize)]
struct CubeInfo {
    n: usize,
    channels: usize,
    channel_stats: Vec<ChannelInfo>,
}

/// Prints a cube file's shape and per-channel statistics as JSON. Writes no
/// files, so it is not part of the recordable experiment configs.
pub fn inspect(path: &Path) -> Result<()> {
    let cube = SpectralCube::load_path(path)?;
    let channel_stats = (0..cube.channels())
        .map(|c| {
            let plane = cube.plane(c);
            let min = plane.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = plane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mean = plane.iter().sum::<f64>() / plane.len() as f64;
            ChannelInfo { channel: c, wavelength: cube.wavelengths()[c], min, max, mean }
        })
        .collect();
    let info = CubeInfo { n: cube.n(), channels: cube.channels(), channel_stats };
    println!("{}", serde_json::to_string_pretty(&info)?);
    Ok(())
}
