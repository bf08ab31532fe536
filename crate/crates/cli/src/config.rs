//! Serializable experiment descriptions.
//!
//! Every command that produces files also records what it ran as
//! `config.json` in the output directory. Feeding that file back through
//! `spi --config` repeats the run and regenerates the outputs byte for byte,
//! so a results directory always documents how to reproduce itself.
//! Execution details that cannot change the numbers (`--out`, `--jobs`) are
//! deliberately not part of the description.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use spi_core::cube::{synth_cube, SpectralCube};
use spi_core::fixtures;
use spi_core::forward::NoiseModel;
use spi_core::neural::SolverConfig;
use spi_core::patterns::Ordering;
use spi_core::pipeline::Method;
use spi_core::Result;

/// One runnable experiment, tagged by the subcommand that created it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum ExperimentConfig {
    Patterns(PatternsSpec),
    Simulate(SimulateSpec),
    Reconstruct(ReconstructSpec),
    Sweep(SweepSpec),
    Metrics(MetricsSpec),
    CubeSynth(CubeSynthSpec),
}

impl ExperimentConfig {
    pub fn load_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Canonical on-disk form: pretty JSON with a trailing newline.
    pub fn to_json(&self) -> Result<String> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        Ok(text)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternsSpec {
    pub n: usize,
    pub sr: f64,
    pub ordering: Ordering,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateSpec {
    pub scene: SceneSource,
    pub patterns: PathBuf,
    pub noise: NoiseModel,
    pub seed: u64,
    pub format: SignalFormat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructSpec {
    pub method: Method,
    pub patterns: PathBuf,
    pub signals: Vec<PathBuf>,
    pub truth: Option<SceneSource>,
    pub solver: SolverConfig,
    pub tv_lambda: Option<f64>,
    pub tv_iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub kind: SweepKind,
    pub fixture: Fixture,
    pub n: usize,
    /// Swept values; iteration-count kinds round these to integers.
    pub grid: Vec<f64>,
    pub methods: Vec<Method>,
    /// Independent repetitions per cell; repetition r derives its noise and
    /// solver streams from `solver.seed + r`.
    pub seeds: u32,
    /// Sampling ratio for the kinds that do not sweep it.
    pub sr: f64,
    pub noise: NoiseModel,
    pub solver: SolverConfig,
    pub tv_lambda: Option<f64>,
    pub tv_iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSpec {
    pub image: PathBuf,
    pub reference: SceneSource,
    pub peak: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CubeSynthSpec {
    pub base: Fixture,
    pub n: usize,
    pub channels: usize,
    pub profile: Profile,
}

/// Built-in test scenes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Fixture {
    /// Four vertical slits of graded intensity.
    FourSlit,
    /// A centered plus sign.
    Cross,
}

impl Fixture {
    pub fn plane(self, n: usize) -> Vec<f64> {
        match self {
            Fixture::FourSlit => fixtures::four_slit(n),
            Fixture::Cross => fixtures::cross(n),
        }
    }
}

impl fmt::Display for Fixture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Fixture::FourSlit => "four-slit",
            Fixture::Cross => "cross",
        })
    }
}

/// Where a scene (a ground-truth cube) comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum SceneSource {
    /// A cube file, typically from `spi cube synth` or a reconstruction.
    CubeFile { path: PathBuf },
    /// A built-in scene as a single-channel cube.
    Fixture { fixture: Fixture, n: usize },
}

impl SceneSource {
    pub fn load(&self) -> Result<SpectralCube> {
        match self {
            SceneSource::CubeFile { path } => SpectralCube::load_path(path),
            SceneSource::Fixture { fixture, n } => {
                let base = fixture.plane(*n);
                synth_cube(&base, *n, &fixtures::spectral_grid(1), fixtures::flat_profile(1.0))
            }
        }
    }
}

/// Spectral transmission profile for synthetic cubes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum Profile {
    /// Gaussian bump peaking at 1 around `center` nm.
    Gaussian { center: f64, width: f64 },
    /// Wavelength-independent transmission.
    Flat { level: f64 },
}

impl Profile {
    pub fn transmission(&self) -> Box<dyn Fn(f64) -> f64> {
        match *self {
            Profile::Gaussian { center, width } => {
                Box::new(fixtures::gaussian_profile(center, width))
            }
            Profile::Flat { level } => Box::new(fixtures::flat_profile(level)),
        }
    }
}

/// On-disk layout for simulated signals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SignalFormat {
    /// JSON header plus little-endian f64 block.
    #[default]
    Binary,
    /// Header comment plus one decimal value per line.
    Text,
}

/// The variable a sweep walks over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    /// Sampling ratio; each cell reconstructs from its own pattern set.
    Sr,
    /// Generator update counts, read as checkpoints of one long run.
    Iters,
    /// Adam learning rate.
    Lr,
    /// Generator input (noise vs warm start), at the grid's checkpoints.
    Init,
}

impl fmt::Display for SweepKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepKind::Sr => "sr",
            SweepKind::Iters => "iters",
            SweepKind::Lr => "lr",
            SweepKind::Init => "init",
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_json_round_trips() {
        let config = ExperimentConfig::Sweep(SweepSpec {
            kind: SweepKind::Sr,
            fixture: Fixture::Cross,
            n: 32,
            grid: vec![0.05, 0.3],
            methods: vec![Method::Tv, Method::Gan],
            seeds: 2,
            sr: 0.3,
            noise: NoiseModel::image_awgn(0.05).unwrap(),
            solver: SolverConfig::default(),
            tv_lambda: None,
            tv_iterations: 400,
        });
        let text = config.to_json().unwrap();
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, config);
        assert!(text.contains("\"command\": \"sweep\""));
        assert!(text.contains("\"fixture\": \"cross\""));
    }

    #[test]
    fn fixture_scene_is_a_single_channel_cube() {
        let cube = SceneSource::Fixture { fixture: Fixture::FourSlit, n: 16 }.load().unwrap();
        assert_eq!(cube.n(), 16);
        assert_eq!(cube.channels(), 1);
        assert_eq!(cube.plane(0), fixtures::four_slit(16).as_slice());
    }

    #[test]
    fn profiles_evaluate_like_the_fixture_curves() {
        let g = Profile::Gaussian { center: 1240.0, width: 240.0 };
        assert!((g.transmission()(1240.0) - 1.0).abs() < 1e-12);
        let f = Profile::Flat { level: 0.25 };
        assert_eq!(f.transmission()(900.0), 0.25);
    }
}
