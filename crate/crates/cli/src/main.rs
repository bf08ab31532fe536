//! `spi`: command-line front end for the single-pixel imaging toolkit.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error (missing, corrupt, or
//! mismatched files), 3 numerical failure (a solver diverged). Every command
//! that writes files also records a `config.json` that `spi --config` replays.

mod commands;
mod config;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use config::{
    CubeSynthSpec, ExperimentConfig, Fixture, MetricsSpec, PatternsSpec, Profile,
    ReconstructSpec, SceneSource, SignalFormat, SimulateSpec, SweepKind, SweepSpec,
};
use spi_core::forward::NoiseModel;
use spi_core::neural::{InitMode, SignalNorm, SolverConfig};
use spi_core::patterns::Ordering;
use spi_core::pipeline::Method;
use spi_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "spi",
    version,
    about = "Single-pixel hyperspectral imaging: simulate, reconstruct, evaluate"
)]
struct Cli {
    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = "spi-out", value_name = "DIR")]
    out: PathBuf,

    /// Worker threads for per-channel and per-cell work.
    #[arg(long, global = true, default_value_t = 1, value_name = "N")]
    jobs: usize,

    /// Base seed for noise streams and solver initialization.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Re-run a recorded config.json verbatim (only --out and --jobs apply).
    #[arg(long, value_name = "FILE", conflicts_with = "seed")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Option<Commands>,
}

#[derive(Subcommand)]
enum Commands {
    /// Generate a Walsh-Hadamard pattern set
    Patterns {
        /// Image side length (power of two)
        #[arg(long)]
        n: usize,
        /// Sampling ratio: patterns per pixel, in (0, 1]
        #[arg(long)]
        sr: f64,
        /// Row ordering: natural | sequency
        #[arg(long, default_value = "sequency", value_parser = parse_ordering)]
        ordering: Ordering,
    },
    /// Simulate bucket-detector acquisition of a scene
    Simulate {
        #[command(flatten)]
        scene: SceneArgs,
        /// Pattern file from `spi patterns`
        #[arg(long, value_name = "FILE")]
        patterns: PathBuf,
        #[command(flatten)]
        noise: NoiseArgs,
        /// Signal file layout
        #[arg(long, value_enum, default_value_t = SignalFormat::Binary)]
        format: SignalFormat,
    },
    /// Reconstruct an image or cube from bucket signals
    Reconstruct {
        /// dgi | tv | gidc | gan
        #[arg(long, value_parser = parse_method)]
        method: Method,
        /// Pattern file the signals were measured with
        #[arg(long, value_name = "FILE")]
        patterns: PathBuf,
        /// Signal file; repeat once per channel for a cube
        #[arg(long = "signal", value_name = "FILE", required = true)]
        signals: Vec<PathBuf>,
        #[command(flatten)]
        truth: TruthArgs,
        #[command(flatten)]
        solver: SolverArgs,
        #[command(flatten)]
        tv: TvArgs,
    },
    /// Grid-run reconstructions over one swept variable
    Sweep {
        /// sr | iters | lr | init
        #[arg(long, value_enum)]
        kind: SweepKind,
        /// Scene fixture
        #[arg(long, value_enum, default_value_t = Fixture::FourSlit)]
        fixture: Fixture,
        /// Scene side length
        #[arg(long, default_value_t = 64)]
        n: usize,
        /// Comma-separated swept values (default depends on kind)
        #[arg(long, value_name = "V,V,...")]
        grid: Option<String>,
        /// Comma-separated methods (default depends on kind)
        #[arg(long, value_name = "M,M,...")]
        methods: Option<String>,
        /// Independent repetitions per cell
        #[arg(long, default_value_t = 3)]
        seeds: u32,
        /// Sampling ratio for kinds that do not sweep it
        #[arg(long, default_value_t = 0.30)]
        sr: f64,
        #[command(flatten)]
        noise: NoiseArgs,
        #[command(flatten)]
        solver: SolverArgs,
        #[command(flatten)]
        tv: TvArgs,
    },
    /// Score a reconstructed cube against a reference
    Metrics {
        /// Reconstructed cube file
        #[arg(long, value_name = "FILE")]
        image: PathBuf,
        #[command(flatten)]
        reference: TruthArgs,
        /// Peak value for PSNR and SSIM
        #[arg(long, default_value_t = 1.0)]
        peak: f64,
    },
    /// Create or inspect spectral cube files
    Cube {
        #[command(subcommand)]
        action: CubeCmd,
    },
}

#[derive(Subcommand)]
enum CubeCmd {
    /// Synthesize a cube from a fixture and a transmission profile
    Synth {
        /// Base scene fixture
        #[arg(long, value_enum, default_value_t = Fixture::FourSlit)]
        base: Fixture,
        /// Side length
        #[arg(long, default_value_t = 64)]
        n: usize,
        /// Spectral channels across the 880-1600 nm grid
        #[arg(long, default_value_t = 8)]
        channels: usize,
        /// Transmission shape: gaussian | flat
        #[arg(long, value_enum, default_value_t = ProfileKind::Gaussian)]
        profile: ProfileKind,
        /// Gaussian center (nm)
        #[arg(long, default_value_t = 1240.0)]
        center: f64,
        /// Gaussian width (nm)
        #[arg(long, default_value_t = 240.0)]
        width: f64,
        /// Flat transmission level in [0, 1]
        #[arg(long, default_value_t = 1.0)]
        level: f64,
    },
    /// Print a cube file's shape and per-channel statistics
    Inspect { path: PathBuf },
}

#[derive(Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum ProfileKind {
    Gaussian,
    Flat,
}

#[derive(Args)]
struct SceneArgs {
    /// Scene cube file
    #[arg(long, value_name = "FILE", conflicts_with_all = ["fixture", "n"])]
    cube: Option<PathBuf>,
    /// Built-in scene
    #[arg(long, value_enum)]
    fixture: Option<Fixture>,
    /// Side length for --fixture
    #[arg(long, default_value_t = 64)]
    n: usize,
}

impl SceneArgs {
    fn into_source(self) -> Result<SceneSource> {
        match (self.cube, self.fixture) {
            (Some(path), None) => Ok(SceneSource::CubeFile { path }),
            (None, Some(fixture)) => Ok(SceneSource::Fixture { fixture, n: self.n }),
            _ => Err(Error::InvalidArgument("pass exactly one of --cube or --fixture".into())),
        }
    }
}

#[derive(Args)]
struct TruthArgs {
    /// Ground-truth cube file
    #[arg(long, value_name = "FILE", conflicts_with_all = ["truth_fixture", "truth_n"])]
    truth_cube: Option<PathBuf>,
    /// Ground-truth fixture (single-channel runs)
    #[arg(long, value_enum)]
    truth_fixture: Option<Fixture>,
    /// Side length for --truth-fixture
    #[arg(long, default_value_t = 64)]
    truth_n: usize,
}

impl TruthArgs {
    fn into_source(self) -> Option<SceneSource> {
        match (self.truth_cube, self.truth_fixture) {
            (Some(path), _) => Some(SceneSource::CubeFile { path }),
            (None, Some(fixture)) => Some(SceneSource::Fixture { fixture, n: self.truth_n }),
            (None, None) => None,
        }
    }
}

#[derive(Args)]
struct NoiseArgs {
    /// Measurement noise: none | image-awgn | bucket-awgn
    #[arg(long, value_enum, default_value_t = NoiseArg::None)]
    noise: NoiseArg,
    /// Noise standard deviation
    #[arg(long, default_value_t = 0.0)]
    sigma: f64,
}

#[derive(Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum NoiseArg {
    None,
    ImageAwgn,
    BucketAwgn,
}

impl NoiseArgs {
    fn into_model(self) -> Result<NoiseModel> {
        match self.noise {
            NoiseArg::None => {
                if self.sigma != 0.0 {
                    return Err(Error::InvalidArgument(
                        "--sigma needs --noise image-awgn or bucket-awgn".into(),
                    ));
                }
                Ok(NoiseModel::none())
            }
            NoiseArg::ImageAwgn => NoiseModel::image_awgn(self.sigma),
            NoiseArg::BucketAwgn => NoiseModel::bucket_awgn(self.sigma),
        }
    }
}

#[derive(Args)]
struct SolverArgs {
    /// Adam learning rate
    #[arg(long, default_value_t = 0.005)]
    lr: f64,
    /// Generator updates
    #[arg(long, default_value_t = 1000)]
    iterations: u64,
    /// Discriminator updates per generator update
    #[arg(long, default_value_t = 1)]
    disc_steps: u32,
    /// Adversarial weight; 0 trains without the critic
    #[arg(long, default_value_t = 1.0)]
    adv_weight: f64,
    /// Generator input: noise | dgi
    #[arg(long, value_enum, default_value_t = InitArg::Noise)]
    init: InitArg,
    /// Signal scaling: mean | l2 | none
    #[arg(long, value_enum, default_value_t = NormArg::Mean)]
    signal_norm: NormArg,
    /// Trace stride; 0 records only the final iteration
    #[arg(long, default_value_t = 10)]
    record_every: u64,
}

#[derive(Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum InitArg {
    Noise,
    Dgi,
}

#[derive(Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum NormArg {
    Mean,
    #[value(name = "l2")]
    L2,
    None,
}

impl SolverArgs {
    fn into_config(self, seed: u64) -> SolverConfig {
        SolverConfig {
            learning_rate: self.lr,
            iterations: self.iterations,
            seed,
            disc_steps_per_gen_step: self.disc_steps,
            init: match self.init {
                InitArg::Noise => InitMode::Noise,
                InitArg::Dgi => InitMode::DgiWarmStart,
            },
            adversarial_weight: self.adv_weight,
            signal_normalization: match self.signal_norm {
                NormArg::Mean => SignalNorm::Mean,
                NormArg::L2 => SignalNorm::L2,
                NormArg::None => SignalNorm::None,
            },
            record_every: self.record_every,
        }
    }
}

#[derive(Args)]
struct TvArgs {
    /// Total-variation weight; the default derives from the data
    #[arg(long, value_name = "W")]
    tv_lambda: Option<f64>,
    /// Gradient-descent iterations for the tv method
    #[arg(long, default_value_t = 400)]
    tv_iterations: usize,
}

fn parse_method(s: &str) -> Result<Method> {
    Method::from_str(s)
}

fn parse_ordering(s: &str) -> Result<Ordering> {
    Ordering::from_str(s)
}

fn parse_grid(text: &str) -> Result<Vec<f64>> {
    let values = text
        .split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<f64>()
                .map_err(|e| Error::InvalidArgument(format!("bad grid value {t:?}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    if values.is_empty() {
        return Err(Error::InvalidArgument("sweep grid is empty".into()));
    }
    Ok(values)
}

fn parse_methods(text: &str) -> Result<Vec<Method>> {
    let methods = text
        .split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(Method::from_str)
        .collect::<Result<Vec<_>>>()?;
    if methods.is_empty() {
        return Err(Error::InvalidArgument("no methods requested".into()));
    }
    Ok(methods)
}

fn default_grid(kind: SweepKind, iterations: u64) -> Vec<f64> {
    match kind {
        SweepKind::Sr => vec![0.05, 0.10, 0.20, 0.30],
        SweepKind::Iters => vec![50.0, 200.0, 1000.0],
        SweepKind::Lr => vec![1e-4, 1e-3, 5e-3, 1e-2],
        SweepKind::Init => vec![iterations as f64],
    }
}

fn default_methods(kind: SweepKind) -> Vec<Method> {
    match kind {
        SweepKind::Sr => vec![Method::Tv, Method::Gidc, Method::Gan],
        SweepKind::Iters | SweepKind::Lr | SweepKind::Init => vec![Method::Gan],
    }
}

fn build_config(command: Commands, seed: u64) -> Result<ExperimentConfig> {
    Ok(match command {
        Commands::Patterns { n, sr, ordering } => {
            ExperimentConfig::Patterns(PatternsSpec { n, sr, ordering })
        }
        Commands::Simulate { scene, patterns, noise, format } => {
            ExperimentConfig::Simulate(SimulateSpec {
                scene: scene.into_source()?,
                patterns,
                noise: noise.into_model()?,
                seed,
                format,
            })
        }
        Commands::Reconstruct { method, patterns, signals, truth, solver, tv } => {
            ExperimentConfig::Reconstruct(ReconstructSpec {
                method,
                patterns,
                signals,
                truth: truth.into_source(),
                solver: solver.into_config(seed),
                tv_lambda: tv.tv_lambda,
                tv_iterations: tv.tv_iterations,
            })
        }
        Commands::Sweep { kind, fixture, n, grid, methods, seeds, sr, noise, solver, tv } => {
            let grid = match grid {
                Some(text) => parse_grid(&text)?,
                None => default_grid(kind, solver.iterations),
            };
            let methods = match methods {
                Some(text) => parse_methods(&text)?,
                None => default_methods(kind),
            };
            ExperimentConfig::Sweep(SweepSpec {
                kind,
                fixture,
                n,
                grid,
                methods,
                seeds,
                sr,
                noise: noise.into_model()?,
                solver: solver.into_config(seed),
                tv_lambda: tv.tv_lambda,
                tv_iterations: tv.tv_iterations,
            })
        }
        Commands::Metrics { image, reference, peak } => {
            let reference = reference.into_source().ok_or_else(|| {
                Error::InvalidArgument("metrics needs --truth-cube or --truth-fixture".into())
            })?;
            ExperimentConfig::Metrics(MetricsSpec { image, reference, peak })
        }
        Commands::Cube { action } => match action {
            CubeCmd::Synth { base, n, channels, profile, center, width, level } => {
                ExperimentConfig::CubeSynth(CubeSynthSpec {
                    base,
                    n,
                    channels,
                    profile: match profile {
                        ProfileKind::Gaussian => Profile::Gaussian { center, width },
                        ProfileKind::Flat => Profile::Flat { level },
                    },
                })
            }
            CubeCmd::Inspect { .. } => unreachable!("inspect is dispatched before config building"),
        },
    })
}

fn run(cli: Cli) -> Result<()> {
    if cli.jobs == 0 {
        return Err(Error::InvalidArgument("--jobs must be at least 1".into()));
    }
    if let Some(path) = cli.config {
        if cli.command.is_some() {
            return Err(Error::InvalidArgument(
                "--config re-runs a recorded experiment; do not also pass a subcommand".into(),
            ));
        }
        let config = ExperimentConfig::load_path(&path)?;
        return commands::execute(&config, &cli.out, cli.jobs);
    }
    let command = cli.command.ok_or_else(|| {
        Error::InvalidArgument("pass a subcommand or --config FILE (see --help)".into())
    })?;
    if let Commands::Cube { action: CubeCmd::Inspect { path } } = &command {
        return commands::cube::inspect(path);
    }
    let config = build_config(command, cli.seed.unwrap_or(0))?;
    commands::execute(&config, &cli.out, cli.jobs)
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::InvalidArgument(_) => 1,
        Error::SolveDiverged { .. } | Error::TvDiverged { .. } => 3,
        _ => 2,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn grid_and_method_lists_parse() {
        assert_eq!(parse_grid("0.05, 0.3").unwrap(), vec![0.05, 0.3]);
        assert!(parse_grid("").is_err());
        assert!(parse_grid("0.1,abc").is_err());
        assert_eq!(parse_methods("dgi,gan").unwrap(), vec![Method::Dgi, Method::Gan]);
        assert!(parse_methods("dgi,zippy").is_err());
    }
}

fn main() -> ExitCode {
    // Die quietly when a pager closes the pipe instead of panicking.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
