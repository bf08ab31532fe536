//! Built-in binary test targets and synthetic spectra.

use crate::cube::{synth_cube, SpectralCube};

/// Four vertical slits, the canonical resolution target. At the reference
/// side of 64 the slits are 5 pixels wide and 30 long with 6-pixel gaps;
/// other sides scale those dimensions proportionally. The group is centered.
pub fn four_slit(n: usize) -> Vec<f64> {
    let scale = n as f64 / 64.0;
    let width = ((5.0 * scale).round() as usize).max(1);
    let gap = ((6.0 * scale).round() as usize).max(1);
    let length = ((30.0 * scale).round() as usize).max(1).min(n);
    let total = 4 * width + 3 * gap;
    let x0 = n.saturating_sub(total) / 2;
    let y0 = (n - length) / 2;

    let mut plane = vec![0.0; n * n];
    for slit in 0..4 {
        let col0 = x0 + slit * (width + gap);
        for row in y0..y0 + length {
            for col in col0..(col0 + width).min(n) {
                plane[row * n + col] = 1.0;
            }
        }
    }
    plane
}

/// A plus-shaped cross: one horizontal and one vertical bar through the
/// center, each `max(1, n/8)` pixels thick. Small and busy enough for fast
/// solver tests at sides like 8 or 16.
pub fn cross(n: usize) -> Vec<f64> {
    let w = (n / 8).max(1);
    let c0 = (n - w) / 2;
    let mut plane = vec![0.0; n * n];
    for row in 0..n {
        for col in 0..n {
            if (c0..c0 + w).contains(&row) || (c0..c0 + w).contains(&col) {
                plane[row * n + col] = 1.0;
            }
        }
    }
    plane
}

/// Evenly spaced wavelengths covering the 880-1600 nm short-wave infrared
/// band used by the default fixtures.
pub fn spectral_grid(channels: usize) -> Vec<f64> {
    assert!(channels >= 1, "need at least one channel");
    if channels == 1 {
        return vec![880.0];
    }
    (0..channels)
        .map(|i| 880.0 + i as f64 * 720.0 / (channels - 1) as f64)
        .collect()
}

/// Gaussian transmission bump centered at `center` nm; peaks at 1, never
/// negative, so it is always a valid transmission profile.
pub fn gaussian_profile(center: f64, width: f64) -> impl Fn(f64) -> f64 {
    move |wl| (-((wl - center) * (wl - center)) / (2.0 * width * width)).exp()
}

/// Wavelength-independent transmission at `level`.
pub fn flat_profile(level: f64) -> impl Fn(f64) -> f64 {
    move |_| level
}

/// The default spectral scene: a four-slit target seen through a Gaussian
/// transmission band, eight channels across the 880-1600 nm grid.
pub fn default_cube(n: usize) -> SpectralCube {
    let grid = spectral_grid(8);
    synth_cube(&four_slit(n), n, &grid, gaussian_profile(1240.0, 240.0))
        .expect("fixture construction cannot fail")
}
