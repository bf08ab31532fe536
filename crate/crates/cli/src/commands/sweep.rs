use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering as AtomicOrdering};
use std::sync::Mutex;

use crate::config::{SweepKind, SweepSpec};
use crate::plot::{line_chart, Series};
use spi_core::classical::{default_tv_lambda, dgi, tv_reconstruct};
use spi_core::cube::synth_cube;
use spi_core::fixtures;
use spi_core::forward::{acquire_cube, BucketSignal};
use spi_core::metrics::{quality, QualityReport};
use spi_core::neural::{gan_solve, gidc_solve, InitMode, SolveTrace, SolverConfig};
use spi_core::patterns::{Ordering, PatternSet};
use spi_core::pipeline::{rescale_to_signal, Method};
use spi_core::rng::channel_seed;
use spi_core::{Error, Result};

/// One reconstruction in the grid.
struct Cell {
    /// Index into the per-ratio pattern and signal tables.
    sr_idx: usize,
    seed_idx: u32,
    method: Method,
    /// The swept value this cell reports under (ratio or learning rate).
    label: f64,
    solver: SolverConfig,
    /// Update counts to read out of the trace (iters and init kinds).
    checkpoints: Vec<u64>,
    /// Keep the full trace for the loss plot (seed 0 of lr and init kinds).
    keep_trace: bool,
    /// Legend label for a kept trace, and the init column of init rows.
    series: String,
}

struct CellOut {
    quality: Option<QualityReport>,
    final_loss: Option<f64>,
    diverged: bool,
    /// (updates, loss, psnr) per requested checkpoint found in the trace.
    checkpoints: Vec<(u64, f64, Option<f64>)>,
    trace: Option<SolveTrace>,
    error: Option<String>,
}

pub fn run(spec: &SweepSpec, out: &Path, jobs: usize) -> Result<()> {
    validate(spec)?;

    let base = spec.fixture.plane(spec.n);
    let scene = synth_cube(&base, spec.n, &fixtures::spectral_grid(1), fixtures::flat_profile(1.0))?;
    let truth = scene.plane(0).to_vec();

    // One pattern set per swept ratio; every other kind shares a single set.
    let ratios: Vec<f64> =
        if spec.kind == SweepKind::Sr { spec.grid.clone() } else { vec![spec.sr] };
    let patterns = ratios
        .iter()
        .map(|&r| PatternSet::generate(spec.n, r, Ordering::Sequency))
        .collect::<Result<Vec<_>>>()?;

    // Acquisitions up front: signals[sr_idx][seed]. Repetition r of a cell
    // reads the same measured data no matter which method or swept value it
    // carries, so cells differ only in what the sweep varies.
    let signals = patterns
        .iter()
        .map(|set| {
            (0..spec.seeds)
                .map(|s| {
                    let seed = channel_seed(spec.solver.seed, s as usize);
                    Ok(acquire_cube(&scene, set, &spec.noise, seed)?.remove(0))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    let cells = build_cells(spec)?;
    let mut slots: Vec<Option<CellOut>> = (0..cells.len()).map(|_| None).collect();
    let workers = jobs.min(cells.len()).max(1);
    if workers == 1 {
        for (i, cell) in cells.iter().enumerate() {
            let signal = &signals[cell.sr_idx][cell.seed_idx as usize];
            slots[i] = Some(run_cell(spec, cell, &patterns[cell.sr_idx], signal, &truth));
        }
    } else {
        let next = AtomicUsize::new(0);
        let shared = Mutex::new(&mut slots);
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, AtomicOrdering::Relaxed);
                    if i >= cells.len() {
                        break;
                    }
                    let cell = &cells[i];
                    let signal = &signals[cell.sr_idx][cell.seed_idx as usize];
                    let result = run_cell(spec, cell, &patterns[cell.sr_idx], signal, &truth);
                    shared.lock().expect("worker panicked holding slot lock")[i] = Some(result);
                });
            }
        });
    }
    let outs: Vec<CellOut> =
        slots.into_iter().map(|s| s.expect("every cell processed")).collect();

    let csv_path = out.join("sweep.csv");
    fs::write(&csv_path, render_csv(spec, &cells, &outs))?;
    let (plot_name, svg) = render_plot(spec, &cells, &outs);
    let plot_path = out.join(plot_name);
    fs::write(&plot_path, svg)?;

    let failures = outs.iter().filter(|o| o.error.is_some()).count();
    let diverged = outs.iter().filter(|o| o.diverged).count();
    println!(
        "sweep[{}]: {} cell(s), {} diverged, {} failed -> {}, {}",
        spec.kind,
        cells.len(),
        diverged,
        failures,
        csv_path.display(),
        plot_path.display()
    );
    Ok(())
}

fn validate(spec: &SweepSpec) -> Result<()> {
    spec.solver.validate()?;
    if spec.grid.is_empty() {
        return Err(Error::InvalidArgument("sweep grid is empty".into()));
    }
    if spec.seeds == 0 {
        return Err(Error::InvalidArgument("seeds must be at least 1".into()));
    }
    if spec.methods.is_empty() {
        return Err(Error::InvalidArgument("no methods requested".into()));
    }
    for (i, m) in spec.methods.iter().enumerate() {
        if spec.methods[..i].contains(m) {
            return Err(Error::InvalidArgument(format!("method {m} requested twice")));
        }
    }
    let iterative = |methods: &[Method]| -> Result<()> {
        for &m in methods {
            if !matches!(m, Method::Gidc | Method::Gan) {
                return Err(Error::InvalidArgument(format!(
                    "{} sweeps need an iterative solver, got {m}",
                    spec.kind
                )));
            }
        }
        Ok(())
    };
    match spec.kind {
        SweepKind::Sr => {
            for &v in &spec.grid {
                if !(v.is_finite() && v > 0.0 && v <= 1.0) {
                    return Err(Error::InvalidArgument(format!(
                        "sampling ratio {v} outside (0, 1]"
                    )));
                }
            }
        }
        SweepKind::Iters => {
            iterative(&spec.methods)?;
            integer_grid(&spec.grid)?;
        }
        SweepKind::Lr => {
            iterative(&spec.methods)?;
            if spec.methods.len() != 1 {
                return Err(Error::InvalidArgument("lr sweeps take exactly one method".into()));
            }
            for &v in &spec.grid {
                if !(v.is_finite() && v > 0.0) {
                    return Err(Error::InvalidArgument(format!(
                        "learning rate {v} must be positive"
                    )));
                }
            }
        }
        SweepKind::Init => {
            iterative(&spec.methods)?;
            if spec.methods.len() != 1 {
                return Err(Error::InvalidArgument("init sweeps take exactly one method".into()));
            }
            integer_grid(&spec.grid)?;
        }
    }
    if spec.methods.contains(&Method::Tv) && spec.tv_iterations == 0 {
        return Err(Error::InvalidArgument("tv iterations must be at least 1".into()));
    }
    Ok(())
}

fn integer_grid(grid: &[f64]) -> Result<Vec<u64>> {
    let mut out = Vec::with_capacity(grid.len());
    for &v in grid {
        if !(v.is_finite() && (1.0..=1e7).contains(&v) && v.fract() == 0.0) {
            return Err(Error::InvalidArgument(format!(
                "iteration checkpoint {v} must be a whole number in [1, 1e7]"
            )));
        }
        out.push(v as u64);
    }
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

fn seeded(solver: &SolverConfig, seed_idx: u32) -> SolverConfig {
    SolverConfig { seed: channel_seed(solver.seed, seed_idx as usize), ..solver.clone() }
}

fn init_name(init: &InitMode) -> &'static str {
    match init {
        InitMode::Noise => "noise",
        InitMode::DgiWarmStart => "dgi",
        InitMode::ExternalImage { .. } => "external",
    }
}

fn build_cells(spec: &SweepSpec) -> Result<Vec<Cell>> {
    let mut cells = Vec::new();
    match spec.kind {
        SweepKind::Sr => {
            for (sr_idx, &ratio) in spec.grid.iter().enumerate() {
                for &method in &spec.methods {
                    for seed_idx in 0..spec.seeds {
                        cells.push(Cell {
                            sr_idx,
                            seed_idx,
                            method,
                            label: ratio,
                            solver: seeded(&spec.solver, seed_idx),
                            checkpoints: Vec::new(),
                            keep_trace: false,
                            series: String::new(),
                        });
                    }
                }
            }
        }
        SweepKind::Iters => {
            // One long run per (method, seed); the grid becomes checkpoints.
            let checkpoints = integer_grid(&spec.grid)?;
            let longest = *checkpoints.last().expect("validated non-empty");
            for &method in &spec.methods {
                for seed_idx in 0..spec.seeds {
                    let mut solver = seeded(&spec.solver, seed_idx);
                    solver.iterations = longest;
                    solver.record_every = 1;
                    cells.push(Cell {
                        sr_idx: 0,
                        seed_idx,
                        method,
                        label: 0.0,
                        solver,
                        checkpoints: checkpoints.clone(),
                        keep_trace: false,
                        series: String::new(),
                    });
                }
            }
        }
        SweepKind::Lr => {
            let method = spec.methods[0];
            for &rate in &spec.grid {
                for seed_idx in 0..spec.seeds {
                    let mut solver = seeded(&spec.solver, seed_idx);
                    solver.learning_rate = rate;
                    cells.push(Cell {
                        sr_idx: 0,
                        seed_idx,
                        method,
                        label: rate,
                        solver,
                        checkpoints: Vec::new(),
                        keep_trace: seed_idx == 0,
                        series: format!("lr={rate}"),
                    });
                }
            }
        }
        SweepKind::Init => {
            // Both input modes at the grid's checkpoints; the configured
            // solver.init only names the recorded baseline.
            let checkpoints = integer_grid(&spec.grid)?;
            let longest = *checkpoints.last().expect("validated non-empty");
            let method = spec.methods[0];
            for init in [InitMode::Noise, InitMode::DgiWarmStart] {
                for seed_idx in 0..spec.seeds {
                    let mut solver = seeded(&spec.solver, seed_idx);
                    solver.iterations = longest;
                    solver.record_every = 1;
                    solver.init = init.clone();
                    cells.push(Cell {
                        sr_idx: 0,
                        seed_idx,
                        method,
                        label: 0.0,
                        solver,
                        checkpoints: checkpoints.clone(),
                        keep_trace: seed_idx == 0,
                        series: init_name(&init).into(),
                    });
                }
            }
        }
    }
    Ok(cells)
}

fn run_cell(
    spec: &SweepSpec,
    cell: &Cell,
    patterns: &PatternSet,
    signal: &BucketSignal,
    truth: &[f64],
) -> CellOut {
    let solved: Result<(Vec<f64>, Option<SolveTrace>)> = (|| match cell.method {
        Method::Dgi => Ok((dgi(patterns, signal)?.image, None)),
        Method::Tv => {
            let lambda = spec.tv_lambda.unwrap_or_else(|| default_tv_lambda(patterns, signal));
            Ok((tv_reconstruct(patterns, signal, lambda, spec.tv_iterations)?, None))
        }
        Method::Gidc => {
            let output = gidc_solve(patterns, signal, &cell.solver, Some(truth))?;
            Ok((rescale_to_signal(&output.image, patterns, signal), Some(output.trace)))
        }
        Method::Gan => {
            let output = gan_solve(patterns, signal, &cell.solver, Some(truth))?;
            Ok((rescale_to_signal(&output.image, patterns, signal), Some(output.trace)))
        }
    })();
    match solved {
        Ok((plane, trace)) => CellOut {
            quality: quality(&plane, truth, 1.0).ok(),
            final_loss: trace.as_ref().and_then(|t| t.last()).map(|r| r.loss),
            diverged: false,
            checkpoints: read_checkpoints(trace.as_ref(), &cell.checkpoints),
            trace: if cell.keep_trace { trace } else { None },
            error: None,
        },
        Err(Error::SolveDiverged { trace, .. }) => CellOut {
            quality: None,
            final_loss: trace.last().map(|r| r.loss),
            diverged: true,
            checkpoints: read_checkpoints(Some(&trace), &cell.checkpoints),
            trace: if cell.keep_trace { Some(trace) } else { None },
            error: None,
        },
        Err(e) => CellOut {
            quality: None,
            final_loss: None,
            diverged: false,
            checkpoints: Vec::new(),
            trace: None,
            error: Some(e.to_string()),
        },
    }
}

/// Pulls (updates, loss, psnr) for each requested checkpoint; update count k
/// corresponds to the trace row with iteration index k - 1.
fn read_checkpoints(trace: Option<&SolveTrace>, wanted: &[u64]) -> Vec<(u64, f64, Option<f64>)> {
    let Some(trace) = trace else { return Vec::new() };
    wanted
        .iter()
        .filter_map(|&k| {
            trace.rows.iter().find(|r| r.iteration == k - 1).map(|r| (k, r.loss, r.psnr_db))
        })
        .collect()
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn render_csv(spec: &SweepSpec, cells: &[Cell], outs: &[CellOut]) -> String {
    let mut csv = String::new();
    match spec.kind {
        SweepKind::Sr => {
            csv.push_str("sr,method,seed,mse,psnr_db,ssim,error\n");
            for (cell, out) in cells.iter().zip(outs) {
                let q = out.quality.as_ref();
                let error = out
                    .error
                    .clone()
                    .unwrap_or_else(|| if out.diverged { "diverged".into() } else { String::new() });
                let _ = writeln!(
                    csv,
                    "{},{},{},{},{},{},{}",
                    cell.label,
                    cell.method,
                    cell.seed_idx,
                    opt(q.map(|q| q.mse)),
                    opt(q.map(|q| q.psnr_db)),
                    opt(q.map(|q| q.ssim)),
                    csv_field(&error)
                );
            }
        }
        SweepKind::Iters => {
            csv.push_str("iterations,method,seed,loss,psnr_db,error\n");
            push_checkpoint_rows(&mut csv, cells, outs, None);
        }
        SweepKind::Lr => {
            csv.push_str("lr,method,seed,final_loss,diverged,psnr_db,error\n");
            for (cell, out) in cells.iter().zip(outs) {
                let _ = writeln!(
                    csv,
                    "{},{},{},{},{},{},{}",
                    cell.label,
                    cell.method,
                    cell.seed_idx,
                    opt(out.final_loss),
                    out.diverged,
                    opt(out.quality.as_ref().map(|q| q.psnr_db)),
                    csv_field(out.error.as_deref().unwrap_or(""))
                );
            }
        }
        SweepKind::Init => {
            csv.push_str("init,iterations,method,seed,loss,psnr_db,error\n");
            push_checkpoint_rows(&mut csv, cells, outs, Some(()));
        }
    }
    csv
}

/// Rows for checkpointed kinds; with `init_column` set, each row leads with
/// the cell's input-mode tag.
fn push_checkpoint_rows(
    csv: &mut String,
    cells: &[Cell],
    outs: &[CellOut],
    init_column: Option<()>,
) {
    for (cell, out) in cells.iter().zip(outs) {
        for &k in &cell.checkpoints {
            let prefix = match init_column {
                Some(()) => format!("{},", cell.series),
                None => String::new(),
            };
            match out.checkpoints.iter().find(|c| c.0 == k) {
                Some(&(_, loss, psnr)) => {
                    let _ = writeln!(
                        csv,
                        "{prefix}{k},{},{},{},{},",
                        cell.method,
                        cell.seed_idx,
                        loss,
                        opt(psnr)
                    );
                }
                None => {
                    let error = out.error.clone().unwrap_or_else(|| {
                        if out.diverged {
                            "diverged before this checkpoint".into()
                        } else {
                            "not recorded".into()
                        }
                    });
                    let _ = writeln!(
                        csv,
                        "{prefix}{k},{},{},,,{}",
                        cell.method,
                        cell.seed_idx,
                        csv_field(&error)
                    );
                }
            }
        }
    }
}

fn median(mut values: Vec<f64>) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(|a, b| a.total_cmp(b));
    let mid = values.len() / 2;
    Some(if values.len() % 2 == 1 {
        values[mid]
    } else {
        0.5 * (values[mid - 1] + values[mid])
    })
}

fn render_plot(spec: &SweepSpec, cells: &[Cell], outs: &[CellOut]) -> (&'static str, String) {
    match spec.kind {
        SweepKind::Sr => {
            let series: Vec<Series> = spec
                .methods
                .iter()
                .map(|&method| {
                    let points = spec
                        .grid
                        .iter()
                        .filter_map(|&ratio| {
                            let psnrs: Vec<f64> = cells
                                .iter()
                                .zip(outs)
                                .filter(|(c, _)| c.method == method && c.label == ratio)
                                .filter_map(|(_, o)| o.quality.as_ref().map(|q| q.psnr_db))
                                .collect();
                            median(psnrs).map(|m| (ratio, m))
                        })
                        .collect();
                    Series { label: method.to_string(), points }
                })
                .collect();
            let title = format!(
                "Median PSNR vs sampling ratio ({} {}x{})",
                spec.fixture, spec.n, spec.n
            );
            ("psnr.svg", line_chart(&title, "sampling ratio", "PSNR (dB)", &series, false))
        }
        SweepKind::Iters => {
            let checkpoints: Vec<u64> =
                cells.first().map(|c| c.checkpoints.clone()).unwrap_or_default();
            let series: Vec<Series> = spec
                .methods
                .iter()
                .map(|&method| {
                    let points = checkpoints
                        .iter()
                        .filter_map(|&k| {
                            let psnrs: Vec<f64> = cells
                                .iter()
                                .zip(outs)
                                .filter(|(c, _)| c.method == method)
                                .filter_map(|(_, o)| {
                                    o.checkpoints.iter().find(|c| c.0 == k).and_then(|c| c.2)
                                })
                                .collect();
                            median(psnrs).map(|m| (k as f64, m))
                        })
                        .collect();
                    Series { label: method.to_string(), points }
                })
                .collect();
            let title = format!("Median PSNR vs updates (sr={})", spec.sr);
            ("psnr.svg", line_chart(&title, "generator updates", "PSNR (dB)", &series, false))
        }
        SweepKind::Lr | SweepKind::Init => {
            let series: Vec<Series> = cells
                .iter()
                .zip(outs)
                .filter(|(c, _)| c.keep_trace)
                .filter_map(|(c, o)| {
                    o.trace.as_ref().map(|t| Series {
                        label: c.series.clone(),
                        points: t
                            .rows
                            .iter()
                            .map(|r| ((r.iteration + 1) as f64, r.loss))
                            .collect(),
                    })
                })
                .collect();
            let what = if spec.kind == SweepKind::Lr { "learning rate" } else { "input mode" };
            let title = format!("Loss vs updates by {what} (seed {})", spec.solver.seed);
            ("loss.svg", line_chart(&title, "generator updates", "loss", &series, true))
        }
    }
}
