use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering as AtomicOrdering};
use std::sync::Mutex;
use std::time::Instant;

use serde::Serialize;

use crate::config::{ReconstructSpec, SceneSource};
use spi_core::classical::{default_tv_lambda, dgi, tv_reconstruct};
use spi_core::cube::SpectralCube;
use spi_core::forward::BucketSignal;
use spi_core::metrics::{quality, QualityReport};
use spi_core::neural::{gan_solve, gidc_solve, SolveTrace, SolverConfig};
use spi_core::patterns::PatternSet;
use spi_core::pipeline::{rescale_to_signal, Method};
use spi_core::rng::channel_seed;
use spi_core::{Error, Result};

/// Wavelength assigned to a single reconstructed image whose signal carries
/// none; the first band of the fixture grid.
const FALLBACK_WAVELENGTH: f64 = 880.0;

#[derive(Serialize)]
struct Report<'a> {
    method: Method,
    rows: &'a [Row],
}

#[derive(Serialize)]
struct Row {
    channel: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    wavelength: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    quality: Option<QualityReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    final_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    converged: Option<bool>,
    /// Printed, never serialized: timing would break byte-identical replays.
    #[serde(skip)]
    wall_ms: f64,
}

struct Outcome {
    plane: Vec<f64>,
    trace: Option<SolveTrace>,
    row: Row,
}

pub fn run(spec: &ReconstructSpec, out: &Path, jobs: usize) -> Result<()> {
    spec.solver.validate()?;
    if spec.method == Method::Tv && spec.tv_iterations == 0 {
        return Err(Error::InvalidArgument("tv iterations must be at least 1".into()));
    }

    let patterns = PatternSet::load_path(&spec.patterns)?;
    let mut signals = spec
        .signals
        .iter()
        .map(BucketSignal::load_path)
        .collect::<Result<Vec<_>>>()?;
    signals.sort_by_key(|s| s.channel_index);
    for pair in signals.windows(2) {
        if pair[0].channel_index == pair[1].channel_index {
            return Err(Error::ShapeMismatch {
                op: "reconstruct",
                detail: format!("two signals claim channel {}", pair[0].channel_index),
            });
        }
    }

    let truth_planes = resolve_truth(spec, &patterns, &signals)?;

    let mut slots: Vec<Option<Result<Outcome>>> = (0..signals.len()).map(|_| None).collect();
    let workers = jobs.min(signals.len()).max(1);
    if workers == 1 {
        for (i, signal) in signals.iter().enumerate() {
            slots[i] = Some(solve_one(spec, &patterns, signal, truth_planes[i].as_deref()));
        }
    } else {
        let next = AtomicUsize::new(0);
        let shared = Mutex::new(&mut slots);
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, AtomicOrdering::Relaxed);
                    if i >= signals.len() {
                        break;
                    }
                    let result = solve_one(spec, &patterns, &signals[i], truth_planes[i].as_deref());
                    shared.lock().expect("worker panicked holding slot lock")[i] = Some(result);
                });
            }
        });
    }
    let mut outcomes = Vec::with_capacity(signals.len());
    for slot in slots {
        outcomes.push(slot.expect("every signal processed")?);
    }

    let wavelengths = cube_wavelengths(&signals)?;
    let planes: Vec<Vec<f64>> = outcomes.iter().map(|o| o.plane.clone()).collect();
    let cube = SpectralCube::from_channels(patterns.n(), wavelengths, &planes)?;
    let cube_path = out.join("recon.cube");
    cube.save_path(&cube_path)?;

    let single = outcomes.len() == 1;
    for outcome in &outcomes {
        if let Some(trace) = &outcome.trace {
            let name = if single {
                "trace.csv".to_string()
            } else {
                format!("trace_{:03}.csv", outcome.row.channel)
            };
            let mut writer = BufWriter::new(File::create(out.join(name))?);
            trace.write_csv(&mut writer)?;
        }
    }

    let rows: Vec<Row> = outcomes.into_iter().map(|o| o.row).collect();
    let mut text = serde_json::to_string_pretty(&Report { method: spec.method, rows: &rows })?;
    text.push('\n');
    fs::write(out.join("report.json"), text)?;

    for row in &rows {
        match &row.quality {
            Some(q) => println!(
                "channel {}: psnr {:.2} dB, ssim {:.4} ({:.0} ms)",
                row.channel, q.psnr_db, q.ssim, row.wall_ms
            ),
            None => println!("channel {}: reconstructed ({:.0} ms)", row.channel, row.wall_ms),
        }
    }
    println!(
        "reconstruct[{}]: {} channel(s) -> {}",
        spec.method,
        rows.len(),
        cube_path.display()
    );
    Ok(())
}

/// One ground-truth plane per signal, in signal order.
fn resolve_truth(
    spec: &ReconstructSpec,
    patterns: &PatternSet,
    signals: &[BucketSignal],
) -> Result<Vec<Option<Vec<f64>>>> {
    match &spec.truth {
        None => Ok(vec![None; signals.len()]),
        Some(SceneSource::Fixture { fixture, n }) => {
            if signals.len() > 1 {
                return Err(Error::InvalidArgument(
                    "a fixture truth describes one channel; use --truth-cube for multi-channel runs"
                        .into(),
                ));
            }
            if *n != patterns.n() {
                return Err(Error::ShapeMismatch {
                    op: "reconstruct",
                    detail: format!("truth fixture is {n}x{n}, patterns are {0}x{0}", patterns.n()),
                });
            }
            Ok(vec![Some(fixture.plane(*n))])
        }
        Some(source @ SceneSource::CubeFile { .. }) => {
            let cube = source.load()?;
            if cube.n() != patterns.n() {
                return Err(Error::ShapeMismatch {
                    op: "reconstruct",
                    detail: format!(
                        "truth cube is {0}x{0}, patterns are {1}x{1}",
                        cube.n(),
                        patterns.n()
                    ),
                });
            }
            signals
                .iter()
                .map(|s| {
                    if s.channel_index >= cube.channels() {
                        return Err(Error::ShapeMismatch {
                            op: "reconstruct",
                            detail: format!(
                                "signal channel {} outside truth cube with {} channel(s)",
                                s.channel_index,
                                cube.channels()
                            ),
                        });
                    }
                    Ok(Some(cube.plane(s.channel_index).to_vec()))
                })
                .collect()
        }
    }
}

fn solve_one(
    spec: &ReconstructSpec,
    patterns: &PatternSet,
    signal: &BucketSignal,
    truth: Option<&[f64]>,
) -> Result<Outcome> {
    let start = Instant::now();
    let (plane, trace) = match spec.method {
        Method::Dgi => (dgi(patterns, signal)?.image, None),
        Method::Tv => {
            let lambda = spec.tv_lambda.unwrap_or_else(|| default_tv_lambda(patterns, signal));
            (tv_reconstruct(patterns, signal, lambda, spec.tv_iterations)?, None)
        }
        Method::Gidc | Method::Gan => {
            let config = SolverConfig {
                seed: channel_seed(spec.solver.seed, signal.channel_index),
                ..spec.solver.clone()
            };
            let output = match spec.method {
                Method::Gidc => gidc_solve(patterns, signal, &config, truth)?,
                _ => gan_solve(patterns, signal, &config, truth)?,
            };
            (rescale_to_signal(&output.image, patterns, signal), Some(output.trace))
        }
    };
    let wall_ms = start.elapsed().as_secs_f64() * 1e3;
    let quality_report = match truth {
        Some(reference) => Some(quality(&plane, reference, 1.0)?),
        None => None,
    };
    let final_loss = trace.as_ref().and_then(|t| t.last()).map(|r| r.loss);
    let converged = trace.as_ref().and_then(|t| convergence_check(t, spec.solver.iterations));
    Ok(Outcome {
        plane,
        trace,
        row: Row {
            channel: signal.channel_index,
            wavelength: signal.wavelength,
            quality: quality_report,
            final_loss,
            converged,
            wall_ms,
        },
    })
}

/// Self-check on a finished solve: the final loss should sit within 5% of
/// the best loss recorded over the last hundred updates. A final value far
/// above that recent floor means the run was still bouncing when it stopped.
fn convergence_check(trace: &SolveTrace, iterations: u64) -> Option<bool> {
    let last = trace.last()?;
    let start = iterations.saturating_sub(100);
    let tail_best = trace
        .rows
        .iter()
        .filter(|r| r.iteration >= start)
        .map(|r| r.loss)
        .fold(f64::INFINITY, f64::min);
    Some(last.loss.is_finite() && last.loss <= 1.05 * tail_best)
}

/// Wavelength axis for the reconstructed cube. A lone image falls back to a
/// default band; a multi-channel cube requires annotated, ordered signals.
fn cube_wavelengths(signals: &[BucketSignal]) -> Result<Vec<f64>> {
    if signals.len() == 1 {
        return Ok(vec![signals[0].wavelength.unwrap_or(FALLBACK_WAVELENGTH)]);
    }
    let mut wavelengths = Vec::with_capacity(signals.len());
    for signal in signals {
        wavelengths.push(signal.wavelength.ok_or_else(|| Error::ShapeMismatch {
            op: "assemble_cube",
            detail: format!(
                "signal channel {} has no wavelength; a multi-channel cube needs one per signal",
                signal.channel_index
            ),
        })?);
    }
    if !wavelengths.windows(2).all(|pair| pair[0] < pair[1]) {
        return Err(Error::ShapeMismatch {
            op: "assemble_cube",
            detail: "wavelengths must increase with channel index".into(),
        });
    }
    Ok(wavelengths)
}
