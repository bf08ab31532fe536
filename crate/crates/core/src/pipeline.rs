//! Hyperspectral orchestration: runs every requested solver over every
//! channel of a [`SpectralCube`] and aggregates quality metrics into a
//! [`PipelineReport`].
//!
//! One pattern sequence is shared across all wavelengths, mirroring a
//! dispersed-detection setup where a single DMD sequence illuminates the
//! scene and a spectrometer splits the bucket light. Channels are processed
//! independently with RNG streams keyed by channel index, so results do not
//! depend on execution order and the channel loop can run on a worker pool.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering as AtomicOrdering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::classical::{default_tv_lambda, dgi, tv_reconstruct};
use crate::cube::SpectralCube;
use crate::error::Error;
use crate::forward::{acquire_cube, BucketSignal, NoiseModel};
use crate::metrics::{self, QualityReport};
use crate::networks::Discriminator;
use crate::neural::{gan_solve_carrying, gidc_solve, SolverConfig};
use crate::patterns::PatternSet;
use crate::rng::channel_seed;
use crate::Result;

/// Reconstruction method selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Dgi,
    Tv,
    Gidc,
    Gan,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Dgi, Method::Tv, Method::Gidc, Method::Gan];

    pub fn name(self) -> &'static str {
        match self {
            Method::Dgi => "dgi",
            Method::Tv => "tv",
            Method::Gidc => "gidc",
            Method::Gan => "gan",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dgi" => Ok(Method::Dgi),
            "tv" => Ok(Method::Tv),
            "gidc" => Ok(Method::Gidc),
            "gan" => Ok(Method::Gan),
            other => Err(Error::InvalidArgument(format!(
                "unknown method {other:?}; expected one of dgi, tv, gidc, gan"
            ))),
        }
    }
}

/// Pipeline-level knobs around the per-solver configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Neural solver settings. The `seed` field is a base value; channel c
    /// derives its own network and warm-start streams from it, so every
    /// channel trains an independent, reproducible generator.
    pub solver: SolverConfig,
    /// Total-variation weight; `None` picks the data-driven default per
    /// channel.
    pub tv_lambda: Option<f64>,
    pub tv_iterations: usize,
    /// Base seed for measurement-noise streams (also derived per channel).
    pub acquisition_seed: u64,
    /// Reuse one discriminator across channels instead of re-initializing it
    /// per channel. This hands the critic from channel c to c+1, so it forces
    /// sequential processing and gives up the channel-order independence that
    /// the default enjoys.
    pub carry_discriminator: bool,
    /// Worker threads for the channel loop.
    pub jobs: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            solver: SolverConfig::default(),
            tv_lambda: None,
            tv_iterations: 400,
            acquisition_seed: 0,
            carry_discriminator: false,
            jobs: 1,
        }
    }
}

/// One (channel, method) outcome. Exactly one of `quality` and `error` is
/// set; a failed solve contributes an all-zero plane to that method's cube
/// and carries the error text here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub channel: usize,
    pub wavelength: f64,
    pub method: Method,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub quality: Option<QualityReport>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
    pub wall_ms: f64,
}

/// Aggregate record of one pipeline run: one row per (channel, method) pair
/// plus a digest of the configuration that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub config_digest: String,
    pub rows: Vec<ReportRow>,
}

impl PipelineReport {
    pub fn failures(&self) -> usize {
        self.rows.iter().filter(|r| r.error.is_some()).count()
    }

    /// Writes the delimiter-separated form, one line per row. Metric cells
    /// are empty for failed rows; an infinite PSNR prints as `inf`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "channel,wavelength,method,mse,psnr_db,ssim,wall_ms,error")?;
        for row in &self.rows {
            let (mse, psnr, ssim) = match &row.quality {
                Some(q) => (format!("{}", q.mse), format!("{}", q.psnr_db), format!("{}", q.ssim)),
                None => (String::new(), String::new(), String::new()),
            };
            let error = row.error.as_deref().map(csv_escape).unwrap_or_default();
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                row.channel, row.wavelength, row.method, mse, psnr, ssim, row.wall_ms, error
            )?;
        }
        Ok(())
    }

    /// Writes the structured machine-readable form.
    pub fn write_json<W: Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer_pretty(w, self)?;
        Ok(())
    }
}

fn csv_escape(field: &str) -> String {
    if field.contains([',', '"', '\n']) {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

struct MethodOutcome {
    plane: Vec<f64>,
    quality: std::result::Result<QualityReport, String>,
    wall_ms: f64,
}

/// Acquires every channel of `cube` under `noise`, reconstructs each one
/// with every requested method, and scores the results against the ground
/// truth planes.
///
/// Returns one reconstructed cube per method (in the order requested) and
/// the aggregate report with `channels × methods` rows, ordered by channel
/// then by method. A solver error on one channel is recorded in its row and
/// leaves a zero plane in that method's cube; the remaining work continues.
/// Check [`PipelineReport::failures`] to surface partial failure.
pub fn run_pipeline(
    cube: &SpectralCube,
    patterns: &PatternSet,
    noise: &NoiseModel,
    methods: &[Method],
    config: &PipelineConfig,
) -> Result<(Vec<(Method, SpectralCube)>, PipelineReport)> {
    if methods.is_empty() {
        return Err(Error::InvalidArgument("no reconstruction methods requested".into()));
    }
    for (i, m) in methods.iter().enumerate() {
        if methods[..i].contains(m) {
            return Err(Error::InvalidArgument(format!("method {m} requested twice")));
        }
    }
    if config.jobs == 0 {
        return Err(Error::InvalidArgument("jobs must be at least 1".into()));
    }
    if config.tv_iterations == 0 && methods.contains(&Method::Tv) {
        return Err(Error::InvalidArgument("tv_iterations must be at least 1".into()));
    }
    config.solver.validate()?;

    let signals = acquire_cube(cube, patterns, noise, config.acquisition_seed)?;
    let channels = cube.channels();
    let digest = config_digest(cube, patterns, noise, methods, config)?;

    let mut slots: Vec<Option<Vec<MethodOutcome>>> = (0..channels).map(|_| None).collect();
    let sequential_gan = config.carry_discriminator && methods.contains(&Method::Gan);
    if sequential_gan {
        let mut carried: Option<Discriminator> = None;
        for c in 0..channels {
            let (outs, next) =
                process_channel(c, &signals[c], cube, patterns, methods, config, carried);
            slots[c] = Some(outs);
            carried = next;
        }
    } else {
        let workers = config.jobs.min(channels).max(1);
        if workers == 1 {
            for c in 0..channels {
                let (outs, _) =
                    process_channel(c, &signals[c], cube, patterns, methods, config, None);
                slots[c] = Some(outs);
            }
        } else {
            let next = AtomicUsize::new(0);
            let shared = Mutex::new(&mut slots);
            std::thread::scope(|scope| {
                for _ in 0..workers {
                    scope.spawn(|| loop {
                        let c = next.fetch_add(1, AtomicOrdering::Relaxed);
                        if c >= channels {
                            break;
                        }
                        let (outs, _) =
                            process_channel(c, &signals[c], cube, patterns, methods, config, None);
                        shared.lock().expect("worker panicked holding slot lock")[c] = Some(outs);
                    });
                }
            });
        }
    }

    let mut rows = Vec::with_capacity(channels * methods.len());
    let mut planes: Vec<Vec<Vec<f64>>> = methods.iter().map(|_| Vec::with_capacity(channels)).collect();
    for (c, slot) in slots.into_iter().enumerate() {
        let outs = slot.expect("every channel processed");
        for (k, out) in outs.into_iter().enumerate() {
            let (quality, error) = match out.quality {
                Ok(q) => (Some(q), None),
                Err(e) => (None, Some(e)),
            };
            rows.push(ReportRow {
                channel: c,
                wavelength: cube.wavelengths()[c],
                method: methods[k],
                quality,
                error,
                wall_ms: out.wall_ms,
            });
            planes[k].push(out.plane);
        }
    }

    let mut cubes = Vec::with_capacity(methods.len());
    for (k, method) in methods.iter().enumerate() {
        let rebuilt = SpectralCube::from_channels(cube.n(), cube.wavelengths().to_vec(), &planes[k])?;
        cubes.push((*method, rebuilt));
    }

    Ok((cubes, PipelineReport { config_digest: digest, rows }))
}

fn process_channel(
    channel: usize,
    signal: &BucketSignal,
    cube: &SpectralCube,
    patterns: &PatternSet,
    methods: &[Method],
    config: &PipelineConfig,
    mut carried: Option<Discriminator>,
) -> (Vec<MethodOutcome>, Option<Discriminator>) {
    let truth = cube.plane(channel);
    let mut outs = Vec::with_capacity(methods.len());
    for &method in methods {
        let start = Instant::now();
        let solved = run_method(method, patterns, signal, truth, config, channel, &mut carried);
        let wall_ms = start.elapsed().as_secs_f64() * 1e3;
        let outcome = match solved {
            Ok(plane) => {
                let quality = metrics::quality(&plane, truth, 1.0).map_err(|e| e.to_string());
                MethodOutcome { plane, quality, wall_ms }
            }
            Err(e) => MethodOutcome {
                plane: vec![0.0; truth.len()],
                quality: Err(e.to_string()),
                wall_ms,
            },
        };
        outs.push(outcome);
    }
    (outs, carried)
}

fn run_method(
    method: Method,
    patterns: &PatternSet,
    signal: &BucketSignal,
    truth: &[f64],
    config: &PipelineConfig,
    channel: usize,
    carried: &mut Option<Discriminator>,
) -> Result<Vec<f64>> {
    match method {
        Method::Dgi => Ok(dgi(patterns, signal)?.image),
        Method::Tv => {
            let lambda = config.tv_lambda.unwrap_or_else(|| default_tv_lambda(patterns, signal));
            tv_reconstruct(patterns, signal, lambda, config.tv_iterations)
        }
        Method::Gidc => {
            let cfg = channel_solver_config(config, channel);
            let out = gidc_solve(patterns, signal, &cfg, Some(truth))?;
            Ok(rescale_to_signal(&out.image, patterns, signal))
        }
        Method::Gan => {
            let cfg = channel_solver_config(config, channel);
            let handed = if config.carry_discriminator { carried.take() } else { None };
            let (out, disc) = gan_solve_carrying(patterns, signal, &cfg, Some(truth), handed)?;
            if config.carry_discriminator {
                *carried = disc;
            }
            Ok(rescale_to_signal(&out.image, patterns, signal))
        }
    }
}

fn channel_solver_config(config: &PipelineConfig, channel: usize) -> SolverConfig {
    SolverConfig { seed: channel_seed(config.solver.seed, channel), ..config.solver.clone() }
}

/// Restores the physical amplitude of a scale-free reconstruction.
///
/// Solvers that normalize signals fit the object only up to a positive
/// scale. The measurement is linear, so the least-squares scalar against the
/// recorded signal, `α = ⟨P·ô, I⟩ / ‖P·ô‖²`, recovers the channel's
/// amplitude; the plane is clamped back to the cube's `[0,1]` range.
pub fn rescale_to_signal(plane: &[f64], patterns: &PatternSet, signal: &BucketSignal) -> Vec<f64> {
    let est = patterns.project(plane);
    let num: f64 = est.iter().zip(&signal.values).map(|(a, b)| a * b).sum();
    let den: f64 = est.iter().map(|a| a * a).sum();
    let alpha = if den > 0.0 && num > 0.0 { num / den } else { 1.0 };
    plane.iter().map(|v| (alpha * v).clamp(0.0, 1.0)).collect()
}

/// Digest of everything that determines the run's numerical output. The
/// worker count is deliberately absent: results are independent of it.
fn config_digest(
    cube: &SpectralCube,
    patterns: &PatternSet,
    noise: &NoiseModel,
    methods: &[Method],
    config: &PipelineConfig,
) -> Result<String> {
    #[derive(Serialize)]
    struct View<'a> {
        n: usize,
        channels: usize,
        m: usize,
        ordering: crate::patterns::Ordering,
        noise: &'a NoiseModel,
        methods: &'a [Method],
        solver: &'a SolverConfig,
        tv_lambda: Option<f64>,
        tv_iterations: usize,
        acquisition_seed: u64,
        carry_discriminator: bool,
    }
    let view = View {
        n: cube.n(),
        channels: cube.channels(),
        m: patterns.m(),
        ordering: patterns.ordering(),
        noise,
        methods,
        solver: &config.solver,
        tv_lambda: config.tv_lambda,
        tv_iterations: config.tv_iterations,
        acquisition_seed: config.acquisition_seed,
        carry_discriminator: config.carry_discriminator,
    };
    let bytes = serde_json::to_vec(&view)?;
    Ok(format!("{:016x}", crate::hash::fnv1a64(&bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::forward::measure;
    use crate::patterns::Ordering;
    use crate::neural::InitMode;

    fn flat_cube(n: usize, channels: usize) -> SpectralCube {
        let base = fixtures::four_slit(n);
        let wavelengths = fixtures::spectral_grid(channels);
        crate::cube::synth_cube(&base, n, &wavelengths, fixtures::flat_profile(1.0)).unwrap()
    }

    fn quick_config() -> PipelineConfig {
        PipelineConfig {
            solver: SolverConfig {
                iterations: 25,
                seed: 7,
                init: InitMode::Noise,
                adversarial_weight: 1.0,
                record_every: 0,
                ..SolverConfig::default()
            },
            tv_iterations: 60,
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn single_channel_dgi_matches_direct_call() {
        let n = 16;
        let cube = flat_cube(n, 1);
        let patterns = PatternSet::generate(n, 0.5, Ordering::Sequency).unwrap();
        let noise = NoiseModel::none();
        let config = quick_config();
        let (cubes, report) =
            run_pipeline(&cube, &patterns, &noise, &[Method::Dgi], &config).unwrap();

        let signal = measure(cube.plane(0), &patterns).unwrap();
        let direct = dgi(&patterns, &signal).unwrap();
        assert_eq!(cubes.len(), 1);
        assert_eq!(cubes[0].0, Method::Dgi);
        assert_eq!(cubes[0].1.plane(0), direct.image.as_slice());

        assert_eq!(report.rows.len(), 1);
        let row = &report.rows[0];
        let expected = metrics::quality(&direct.image, cube.plane(0), 1.0).unwrap();
        assert_eq!(row.quality.as_ref().unwrap(), &expected);
        assert!(row.error.is_none());
        assert!(row.wall_ms >= 0.0);
    }

    #[test]
    fn report_cardinality_and_ordering() {
        let cube = flat_cube(8, 3);
        let patterns = PatternSet::generate(8, 0.5, Ordering::Sequency).unwrap();
        let methods = [Method::Dgi, Method::Tv];
        let (cubes, report) =
            run_pipeline(&cube, &patterns, &NoiseModel::none(), &methods, &quick_config()).unwrap();

        assert_eq!(report.rows.len(), cube.channels() * methods.len());
        assert_eq!(cubes.len(), methods.len());
        for (c, pair) in report.rows.chunks(2).enumerate() {
            assert_eq!(pair[0].channel, c);
            assert_eq!(pair[1].channel, c);
            assert_eq!(pair[0].method, Method::Dgi);
            assert_eq!(pair[1].method, Method::Tv);
            assert_eq!(pair[0].wavelength, cube.wavelengths()[c]);
        }
        assert_eq!(report.failures(), 0);
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let n = 16;
        let cube = flat_cube(n, 3);
        let patterns = PatternSet::generate(n, 0.4, Ordering::Sequency).unwrap();
        let noise = NoiseModel::image_awgn(0.05).unwrap();
        let methods = [Method::Dgi, Method::Gidc];

        let serial = quick_config();
        let mut parallel = quick_config();
        parallel.jobs = 3;

        let (cubes_a, report_a) =
            run_pipeline(&cube, &patterns, &noise, &methods, &serial).unwrap();
        let (cubes_b, report_b) =
            run_pipeline(&cube, &patterns, &noise, &methods, &parallel).unwrap();

        for ((ma, ca), (mb, cb)) in cubes_a.iter().zip(&cubes_b) {
            assert_eq!(ma, mb);
            for c in 0..cube.channels() {
                assert_eq!(ca.plane(c), cb.plane(c));
            }
        }
        assert_eq!(report_a.config_digest, report_b.config_digest);
        for (ra, rb) in report_a.rows.iter().zip(&report_b.rows) {
            assert_eq!(ra.quality, rb.quality);
            assert_eq!(ra.error, rb.error);
        }
    }

    #[test]
    fn failed_method_recorded_and_pipeline_continues() {
        let cube = flat_cube(8, 2);
        let patterns = PatternSet::generate(8, 0.5, Ordering::Sequency).unwrap();
        let mut config = quick_config();
        config.tv_lambda = Some(f64::NAN);
        let methods = [Method::Tv, Method::Dgi];
        let (cubes, report) =
            run_pipeline(&cube, &patterns, &NoiseModel::none(), &methods, &config).unwrap();

        assert_eq!(report.rows.len(), 4);
        assert_eq!(report.failures(), 2);
        for row in &report.rows {
            match row.method {
                Method::Tv => {
                    assert!(row.quality.is_none());
                    assert!(row.error.as_ref().unwrap().contains("TV weight"));
                }
                _ => assert!(row.error.is_none()),
            }
        }
        let tv_cube = &cubes[0].1;
        for c in 0..2 {
            assert!(tv_cube.plane(c).iter().all(|&v| v == 0.0));
        }
        let dgi_cube = &cubes[1].1;
        assert!(dgi_cube.plane(0).iter().any(|&v| v > 0.0));
    }

    #[test]
    fn rescale_recovers_channel_amplitude() {
        let n = 16;
        let base = fixtures::four_slit(n);
        let dim: Vec<f64> = base.iter().map(|v| 0.37 * v).collect();
        let patterns = PatternSet::generate(n, 0.5, Ordering::Sequency).unwrap();
        let signal = measure(&dim, &patterns).unwrap();
        let restored = rescale_to_signal(&base, &patterns, &signal);
        for (r, d) in restored.iter().zip(&dim) {
            assert!((r - d).abs() < 1e-12, "{r} vs {d}");
        }
    }

    #[test]
    fn carried_discriminator_is_deterministic() {
        let n = 16;
        let cube = flat_cube(n, 2);
        let patterns = PatternSet::generate(n, 0.5, Ordering::Sequency).unwrap();
        let mut config = quick_config();
        config.solver.iterations = 15;
        config.carry_discriminator = true;
        let run = || {
            run_pipeline(&cube, &patterns, &NoiseModel::none(), &[Method::Gan], &config).unwrap()
        };
        let (cubes_a, report_a) = run();
        let (cubes_b, _) = run();
        assert_eq!(report_a.failures(), 0);
        assert_eq!(report_a.rows.len(), 2);
        for c in 0..2 {
            assert_eq!(cubes_a[0].1.plane(c), cubes_b[0].1.plane(c));
        }
    }

    #[test]
    fn rejects_bad_method_lists() {
        let cube = flat_cube(8, 1);
        let patterns = PatternSet::generate(8, 0.5, Ordering::Sequency).unwrap();
        let config = quick_config();
        let err = run_pipeline(&cube, &patterns, &NoiseModel::none(), &[], &config).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
        let err = run_pipeline(
            &cube,
            &patterns,
            &NoiseModel::none(),
            &[Method::Dgi, Method::Dgi],
            &config,
        )
        .unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn method_parsing_round_trips() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("hadamard".parse::<Method>().is_err());
        assert_eq!(serde_json::to_string(&Method::Gan).unwrap(), "\"gan\"");
    }

    #[test]
    fn csv_and_json_report_forms() {
        let report = PipelineReport {
            config_digest: "00ff00ff00ff00ff".into(),
            rows: vec![
                ReportRow {
                    channel: 0,
                    wavelength: 880.0,
                    method: Method::Dgi,
                    quality: Some(QualityReport { mse: 0.25, psnr_db: 6.0, ssim: 0.5 }),
                    error: None,
                    wall_ms: 1.5,
                },
                ReportRow {
                    channel: 0,
                    wavelength: 880.0,
                    method: Method::Tv,
                    quality: None,
                    error: Some("weight must be finite, got NaN".into()),
                    wall_ms: 0.5,
                },
            ],
        };
        let mut csv = Vec::new();
        report.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "channel,wavelength,method,mse,psnr_db,ssim,wall_ms,error");
        assert_eq!(lines[1], "0,880,dgi,0.25,6,0.5,1.5,");
        assert_eq!(lines[2], "0,880,tv,,,,0.5,\"weight must be finite, got NaN\"");

        let mut json = Vec::new();
        report.write_json(&mut json).unwrap();
        let parsed: PipelineReport = serde_json::from_slice(&json).unwrap();
        assert_eq!(parsed, report);
    }

    #[test]
    fn config_digest_tracks_inputs() {
        let cube = flat_cube(8, 2);
        let patterns = PatternSet::generate(8, 0.5, Ordering::Sequency).unwrap();
        let noise = NoiseModel::none();
        let config = quick_config();
        let a = config_digest(&cube, &patterns, &noise, &[Method::Dgi], &config).unwrap();
        let b = config_digest(&cube, &patterns, &noise, &[Method::Dgi], &config).unwrap();
        assert_eq!(a, b);
        let mut other = config.clone();
        other.acquisition_seed = 1;
        let c = config_digest(&cube, &patterns, &noise, &[Method::Dgi], &other).unwrap();
        assert_ne!(a, c);
        let d = config_digest(&cube, &patterns, &noise, &[Method::Tv], &config).unwrap();
        assert_ne!(a, d);
    }
}
