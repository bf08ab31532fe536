//! Physics-driven untrained-network reconstruction.
//!
//! Both solvers fit a randomly initialized generator so that the measurement
//! model applied to its output reproduces the recorded bucket signal. No
//! training data is involved; the network weights are the optimization
//! variable. [`gidc_solve`] minimizes the measurement misfit alone, while
//! [`gan_solve`] adds an adversarial critic on the signal domain that is
//! trained jointly, one discriminator step per generator step by default.

use crate::classical::dgi;
use crate::error::Error;
use crate::forward::BucketSignal;
use crate::metrics;
use crate::networks::{Discriminator, Generator};
use crate::patterns::PatternSet;
use crate::rng::{stream, Role};
use crate::tensor::{Tape, Tensor, TensorRef};
use crate::Result;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;

/// Floor applied inside every `log` of the adversarial terms so that a
/// saturated discriminator yields a large finite loss instead of infinity.
pub const LOG_FLOOR: f64 = 1e-12;

/// How the generator input plane is produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitMode {
    /// Uniform `[0,1)` noise drawn from the input-noise stream of the seed.
    Noise,
    /// Differential ghost imaging estimate of the target; a warm start.
    DgiWarmStart,
    /// Caller-supplied plane with values in `[0,1]`.
    ExternalImage { plane: Vec<f64> },
}

/// How measured and estimated signals are scaled before the losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalNorm {
    /// Divide by the arithmetic mean.
    Mean,
    /// Divide by the Euclidean norm.
    L2,
    /// Use raw values.
    None,
}

/// Knobs for [`gan_solve`] and [`gidc_solve`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Adam learning rate for both networks.
    pub learning_rate: f64,
    /// Number of generator updates.
    pub iterations: u64,
    /// Base seed; generator init, discriminator init, and input noise use
    /// separate deterministic streams derived from it.
    pub seed: u64,
    /// Discriminator updates per generator update. Must stay >= 1; to train
    /// without a critic set `adversarial_weight` to zero instead.
    pub disc_steps_per_gen_step: u32,
    /// Generator input.
    pub init: InitMode,
    /// Weight of the adversarial term in the generator loss. Zero disables
    /// the discriminator entirely.
    pub adversarial_weight: f64,
    /// Signal scaling applied before the losses and the discriminator.
    pub signal_normalization: SignalNorm,
    /// Record a trace row every this many iterations (the last iteration is
    /// always recorded). Zero records only the last iteration.
    pub record_every: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.005,
            iterations: 1000,
            seed: 0,
            disc_steps_per_gen_step: 1,
            init: InitMode::Noise,
            adversarial_weight: 1.0,
            signal_normalization: SignalNorm::Mean,
            record_every: 10,
        }
    }
}

impl SolverConfig {
    /// Checks every field for a usable value; the solvers call this on entry,
    /// and config-building front ends can call it to fail fast.
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidArgument("iterations must be >= 1".into()));
        }
        if self.disc_steps_per_gen_step == 0 {
            return Err(Error::InvalidArgument(
                "disc_steps_per_gen_step must be >= 1; set adversarial_weight to 0 \
                 to train without the discriminator"
                    .into(),
            ));
        }
        if !(self.adversarial_weight.is_finite() && self.adversarial_weight >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "adversarial weight must be finite and >= 0, got {}",
                self.adversarial_weight
            )));
        }
        if let InitMode::ExternalImage { plane } = &self.init {
            if let Some(&v) = plane.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::InvalidArgument(format!(
                    "external init plane has value {v} outside [0,1]"
                )));
            }
        }
        Ok(())
    }
}

/// One recorded optimization step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: u64,
    /// Total generator loss.
    pub loss: f64,
    /// Measurement misfit term (sum of squared signal differences).
    pub mse_term: f64,
    /// Weighted adversarial term; zero when the discriminator is disabled.
    pub adv_term: f64,
    /// Discriminator loss after its update; zero when disabled.
    pub disc_loss: f64,
    /// Image quality against the reference, when one was supplied.
    pub psnr_db: Option<f64>,
    pub ssim: Option<f64>,
}

/// Loss history of a solver run. Rows are in strictly increasing iteration
/// order by construction.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SolveTrace {
    pub rows: Vec<TraceRow>,
}

impl SolveTrace {
    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn last(&self) -> Option<&TraceRow> {
        self.rows.last()
    }

    /// Writes the trace as delimiter-separated text with a header row.
    /// Quality columns are left empty when no reference image was supplied.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "iteration,loss,mse_term,adv_term,disc_loss,psnr_db,ssim")?;
        for r in &self.rows {
            let psnr = r.psnr_db.map(fmt_metric).unwrap_or_default();
            let ssim = r.ssim.map(fmt_metric).unwrap_or_default();
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                r.iteration, r.loss, r.mse_term, r.adv_term, r.disc_loss, psnr, ssim
            )?;
        }
        Ok(())
    }
}

fn fmt_metric(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v}")
    }
}

/// Solver output: the reconstructed plane (raw generator output, values in
/// `(0,1)`) and the recorded loss history.
#[derive(Debug, Clone)]
pub struct SolveOutput {
    pub image: Vec<f64>,
    pub trace: SolveTrace,
}

/// Sum of squared differences between two equal-length signals.
///
/// This is the measurement misfit used by the solvers, a plain sum rather
/// than a mean, so its scale grows with the number of patterns.
pub fn mse_objective(estimated: &[f64], measured: &[f64]) -> Result<f64> {
    if estimated.len() != measured.len() {
        return Err(Error::ShapeMismatch {
            op: "mse_objective",
            detail: format!("{} vs {} samples", estimated.len(), measured.len()),
        });
    }
    Ok(estimated
        .iter()
        .zip(measured)
        .map(|(a, b)| (a - b) * (a - b))
        .sum())
}

/// Generator-side adversarial term `-log D(estimated)` with the probability
/// clamped to at least [`LOG_FLOOR`].
pub fn adversarial_objective(disc: &Discriminator, estimated: &[f64]) -> Result<f64> {
    let p = disc.evaluate(estimated)?;
    Ok(-p.max(LOG_FLOOR).ln())
}

/// Discriminator loss `-log D(measured) - log(1 - D(estimated))`, both
/// probabilities clamped to at least [`LOG_FLOOR`].
pub fn discriminator_objective(
    disc: &Discriminator,
    measured: &[f64],
    estimated: &[f64],
) -> Result<f64> {
    let p_real = disc.evaluate(measured)?;
    let p_fake = disc.evaluate(estimated)?;
    Ok(-p_real.max(LOG_FLOOR).ln() - (1.0 - p_fake).max(LOG_FLOOR).ln())
}

/// Scales a signal according to `mode`. A zero mean or zero norm is an error
/// because the scaled signal would be undefined.
pub fn normalize_signal(signal: &[f64], mode: SignalNorm) -> Result<Vec<f64>> {
    let divisor = match mode {
        SignalNorm::None => return Ok(signal.to_vec()),
        SignalNorm::Mean => signal.iter().sum::<f64>() / signal.len().max(1) as f64,
        SignalNorm::L2 => signal.iter().map(|v| v * v).sum::<f64>().sqrt(),
    };
    if divisor == 0.0 || !divisor.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "signal normalization divisor is {divisor}; cannot scale"
        )));
    }
    Ok(signal.iter().map(|v| v / divisor).collect())
}

/// Produces the generator input plane for `mode`.
///
/// `Noise` draws from the input-noise stream of `seed`, so the same seed
/// reproduces the same plane regardless of what else consumed randomness.
pub fn warm_start_input(
    mode: &InitMode,
    patterns: &PatternSet,
    signal: &BucketSignal,
    seed: u64,
) -> Result<Vec<f64>> {
    let n2 = patterns.n() * patterns.n();
    match mode {
        InitMode::Noise => {
            let mut rng = stream(seed, Role::InputNoise);
            Ok((0..n2).map(|_| rng.gen::<f64>()).collect())
        }
        InitMode::DgiWarmStart => Ok(dgi(patterns, signal)?.image),
        InitMode::ExternalImage { plane } => {
            if plane.len() != n2 {
                return Err(Error::ShapeMismatch {
                    op: "warm_start_input",
                    detail: format!("external plane has {} values, expected {n2}", plane.len()),
                });
            }
            Ok(plane.clone())
        }
    }
}

/// Reconstructs by fitting the generator alone: the loss is the sum of
/// squared differences between normalized estimated and measured signals.
pub fn gidc_solve(
    patterns: &PatternSet,
    signal: &BucketSignal,
    config: &SolverConfig,
    reference: Option<&[f64]>,
) -> Result<SolveOutput> {
    let (out, _) = solve_inner(patterns, signal, config, reference, false, None)?;
    Ok(out)
}

/// Reconstructs with the full generator/discriminator game. With
/// `adversarial_weight == 0` the discriminator is never built or consulted
/// and the run is identical to [`gidc_solve`] under the same config.
pub fn gan_solve(
    patterns: &PatternSet,
    signal: &BucketSignal,
    config: &SolverConfig,
    reference: Option<&[f64]>,
) -> Result<SolveOutput> {
    let adversarial = config.adversarial_weight != 0.0;
    let (out, _) = solve_inner(patterns, signal, config, reference, adversarial, None)?;
    Ok(out)
}

/// [`gan_solve`] variant that can start from an existing discriminator and
/// returns the trained one, letting callers share a critic across related
/// reconstructions (for example the channels of a spectral cube).
pub fn gan_solve_carrying(
    patterns: &PatternSet,
    signal: &BucketSignal,
    config: &SolverConfig,
    reference: Option<&[f64]>,
    carried: Option<Discriminator>,
) -> Result<(SolveOutput, Option<Discriminator>)> {
    let adversarial = config.adversarial_weight != 0.0;
    solve_inner(patterns, signal, config, reference, adversarial, carried)
}

fn solve_inner(
    patterns: &PatternSet,
    signal: &BucketSignal,
    config: &SolverConfig,
    reference: Option<&[f64]>,
    adversarial: bool,
    carried: Option<Discriminator>,
) -> Result<(SolveOutput, Option<Discriminator>)> {
    config.validate()?;
    let n = patterns.n();
    let m = patterns.m();
    if signal.values.len() != m {
        return Err(Error::ShapeMismatch {
            op: "solve",
            detail: format!("signal has {} samples, pattern set has {m}", signal.values.len()),
        });
    }
    if let Some(r) = reference {
        if r.len() != n * n {
            return Err(Error::ShapeMismatch {
                op: "solve",
                detail: format!("reference has {} values, expected {}", r.len(), n * n),
            });
        }
    }

    let measured = normalize_signal(&signal.values, config.signal_normalization)?;
    let input = warm_start_input(&config.init, patterns, signal, config.seed)?;
    let mut gen = Generator::new(n, config.seed)?;
    let mut gen_adam = crate::adam::AdamState::new(gen.params().len(), config.learning_rate);

    let mut disc = if adversarial {
        match carried {
            Some(d) => {
                if d.signal_len() != m {
                    return Err(Error::ShapeMismatch {
                        op: "solve",
                        detail: format!(
                            "carried discriminator expects {} samples, pattern set has {m}",
                            d.signal_len()
                        ),
                    });
                }
                Some(d)
            }
            None => Some(Discriminator::new(m, config.seed)?),
        }
    } else {
        None
    };
    let mut disc_adam = disc
        .as_ref()
        .map(|d| crate::adam::AdamState::new(d.params().len(), config.learning_rate));

    // The discriminator trains against the previous generator step's
    // estimate, so one fresh forward pass seeds the cache before the loop.
    let mut estimated_cache = if adversarial {
        let plane = gen.generate(&input)?;
        let est = patterns.project(&plane);
        normalize_signal(&est, config.signal_normalization)?
    } else {
        Vec::new()
    };

    let mut trace = SolveTrace::default();
    let mut final_plane = Vec::new();
    for iteration in 0..config.iterations {
        let mut disc_loss = 0.0;
        let mut diverged = false;
        if let (Some(d), Some(d_adam)) = (disc.as_mut(), disc_adam.as_mut()) {
            for _ in 0..config.disc_steps_per_gen_step {
                let (loss, step_diverged) = disc_step(d, d_adam, &measured, &estimated_cache)?;
                disc_loss = loss;
                diverged |= step_diverged;
                if diverged {
                    break;
                }
            }
        }

        let step = gen_step(
            &mut gen,
            &mut gen_adam,
            disc.as_ref(),
            patterns,
            &input,
            &measured,
            config,
        )?;
        diverged |= step.diverged;
        if adversarial {
            estimated_cache = step.estimated;
        }
        final_plane = step.plane;

        let record = config.record_every != 0 && iteration % config.record_every == 0;
        if record || iteration + 1 == config.iterations || diverged {
            let (psnr_db, ssim) = match reference {
                Some(truth) => {
                    let normalized = metrics::normalize_unit(&final_plane);
                    let q = metrics::quality(&normalized, truth, 1.0)?;
                    (Some(q.psnr_db), Some(q.ssim))
                }
                None => (None, None),
            };
            trace.rows.push(TraceRow {
                iteration,
                loss: step.loss,
                mse_term: step.mse_term,
                adv_term: step.adv_term,
                disc_loss,
                psnr_db,
                ssim,
            });
        }
        if diverged {
            return Err(Error::SolveDiverged { iteration, trace });
        }
    }

    // The loop's plane predates the last weight update; report the network's
    // final state instead.
    let image = gen.generate(&input)?;
    let _ = final_plane;
    Ok((SolveOutput { image, trace }, disc))
}

struct GenStep {
    loss: f64,
    mse_term: f64,
    adv_term: f64,
    /// Generator output before this step's weight update.
    plane: Vec<f64>,
    /// Normalized estimated signal for the same weights.
    estimated: Vec<f64>,
    /// Loss or gradients overflowed; the weight update was skipped.
    diverged: bool,
}

fn gen_step(
    gen: &mut Generator,
    adam: &mut crate::adam::AdamState,
    disc: Option<&Discriminator>,
    patterns: &PatternSet,
    input: &[f64],
    measured: &[f64],
    config: &SolverConfig,
) -> Result<GenStep> {
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::new(input.to_vec(), &[input.len()])?);
    let (out, param_refs) = gen.forward(&mut tape, z, true)?;
    let flat = tape.reshape(out, &[input.len()])?;
    let est = tape.measure(flat, patterns)?;
    let est_norm = normalize_on_tape(&mut tape, est, config.signal_normalization)?;
    let target = tape.constant(Tensor::new(measured.to_vec(), &[measured.len()])?);
    let diff = tape.sub(est_norm, target)?;
    let sq = tape.square(diff)?;
    let mse = tape.sum(sq)?;

    let (loss_ref, adv_value) = match disc {
        Some(d) => {
            // The critic's value and input-gradient are computed off-tape,
            // then spliced in as the linearization c + <g, s>: same value,
            // same gradient, none of the m×m layers on this graph.
            let est_vals = tape.values(est_norm).to_vec();
            let (adv_raw, g_adv) = d.adv_input_grad(&est_vals, LOG_FLOOR)?;
            let anchor = adv_raw - crate::tensor::dot(&g_adv, &est_vals);
            let g_node = tape.constant(Tensor::new(g_adv, &[est_vals.len()])?);
            let prod = tape.mul(est_norm, g_node)?;
            let lin = tape.sum(prod)?;
            let c_node = tape.constant(Tensor::scalar(anchor));
            let neg = tape.add(lin, c_node)?;
            let w = tape.constant(Tensor::scalar(config.adversarial_weight));
            let adv = tape.mul(w, neg)?;
            let total = tape.add(mse, adv)?;
            (total, tape.values(adv)[0])
        }
        None => (mse, 0.0),
    };

    let loss = tape.values(loss_ref)[0];
    let mse_term = tape.values(mse)[0];
    let plane = tape.values(flat).to_vec();
    let estimated = tape.values(est_norm).to_vec();
    let mut diverged = !loss.is_finite();
    if !diverged {
        tape.backward(loss_ref)?;
        let grads = collect_grads(&tape, &param_refs, gen.params().len());
        if grads.iter().all(|g| g.is_finite()) {
            adam.update(gen.params_mut(), &grads)?;
        } else {
            diverged = true;
        }
    }
    Ok(GenStep { loss, mse_term, adv_term: adv_value, plane, estimated, diverged })
}

fn disc_step(
    disc: &mut Discriminator,
    adam: &mut crate::adam::AdamState,
    measured: &[f64],
    estimated: &[f64],
) -> Result<(f64, bool)> {
    disc.train_step(adam, measured, estimated, LOG_FLOOR)
}

fn normalize_on_tape(tape: &mut Tape, signal: TensorRef, mode: SignalNorm) -> Result<TensorRef> {
    match mode {
        SignalNorm::None => Ok(signal),
        SignalNorm::Mean => {
            let mu = tape.mean(signal)?;
            tape.div(signal, mu)
        }
        SignalNorm::L2 => {
            let sq = tape.square(signal)?;
            let s = tape.sum(sq)?;
            let norm = tape.sqrt(s)?;
            tape.div(signal, norm)
        }
    }
}

fn collect_grads(tape: &Tape, param_refs: &[TensorRef], total: usize) -> Vec<f64> {
    let mut grads = Vec::with_capacity(total);
    for &r in param_refs {
        grads.extend_from_slice(tape.grad(r).expect("param gradient present after backward"));
    }
    debug_assert_eq!(grads.len(), total);
    grads
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::measure;
    use crate::patterns::{Ordering, PatternSet};

    fn setup(n: usize, sr: f64) -> (PatternSet, BucketSignal, Vec<f64>) {
        let patterns = PatternSet::generate(n, sr, Ordering::Sequency).unwrap();
        let truth = crate::fixtures::cross(n);
        let signal = measure(&truth, &patterns).unwrap();
        (patterns, signal, truth)
    }

    #[test]
    fn objective_examples() {
        assert!((mse_objective(&[1.0, 2.0], &[1.0, 2.0]).unwrap()).abs() < 1e-15);
        let v = mse_objective(&[1.0, 2.0, 3.0], &[1.1, 1.9, 3.3]).unwrap();
        assert!((v - 0.11).abs() < 1e-12, "{v}");
        assert!(mse_objective(&[1.0], &[1.0, 2.0]).is_err());

        // -ln(0.5) and -ln(1e-12) after clamping.
        assert!((-(0.5f64).ln() - 0.6931471805599453).abs() < 1e-15);
        assert!(((-(LOG_FLOOR.ln())) - 27.631021115928547).abs() < 1e-12);
        // -ln(0.5) - ln(0.5) for a coin-flip discriminator.
        let both = -(0.5f64.ln()) - (0.5f64.ln());
        assert!((both - 1.3862943611198906).abs() < 1e-15);
        // -ln(0.9) - ln(1 - 0.2)
        let sharp: f64 = -(0.9f64.ln()) - (0.8f64.ln());
        assert!((sharp - 0.3285040669720361).abs() < 1e-15);
    }

    #[test]
    fn normalize_signal_modes() {
        let s = [2.0, 4.0, 6.0];
        let mean = normalize_signal(&s, SignalNorm::Mean).unwrap();
        assert_eq!(mean, vec![0.5, 1.0, 1.5]);
        let l2 = normalize_signal(&s, SignalNorm::L2).unwrap();
        let norm = (4.0f64 + 16.0 + 36.0).sqrt();
        for (a, b) in l2.iter().zip(&s) {
            assert!((a - b / norm).abs() < 1e-15);
        }
        assert_eq!(normalize_signal(&s, SignalNorm::None).unwrap(), s.to_vec());
        assert!(normalize_signal(&[1.0, -1.0], SignalNorm::Mean).is_err());
        assert!(normalize_signal(&[0.0, 0.0], SignalNorm::L2).is_err());
    }

    #[test]
    fn warm_start_modes() {
        let (patterns, signal, _) = setup(16, 0.5);
        let noise = warm_start_input(&InitMode::Noise, &patterns, &signal, 7).unwrap();
        assert_eq!(noise.len(), 256);
        assert!(noise.iter().all(|v| (0.0..1.0).contains(v)));
        let again = warm_start_input(&InitMode::Noise, &patterns, &signal, 7).unwrap();
        assert_eq!(noise, again);

        let warm = warm_start_input(&InitMode::DgiWarmStart, &patterns, &signal, 7).unwrap();
        let direct = dgi(&patterns, &signal).unwrap().image;
        assert_eq!(warm, direct);

        let plane = vec![0.25; 256];
        let ext = warm_start_input(
            &InitMode::ExternalImage { plane: plane.clone() },
            &patterns,
            &signal,
            7,
        )
        .unwrap();
        assert_eq!(ext, plane);
        let bad = InitMode::ExternalImage { plane: vec![0.5; 9] };
        assert!(warm_start_input(&bad, &patterns, &signal, 7).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = SolverConfig::default();
        c.learning_rate = 0.0;
        assert!(c.validate().is_err());
        let mut c = SolverConfig::default();
        c.iterations = 0;
        assert!(c.validate().is_err());
        let mut c = SolverConfig::default();
        c.disc_steps_per_gen_step = 0;
        assert!(c.validate().is_err());
        let mut c = SolverConfig::default();
        c.adversarial_weight = -0.5;
        assert!(c.validate().is_err());
        let mut c = SolverConfig::default();
        c.init = InitMode::ExternalImage { plane: vec![1.5] };
        assert!(c.validate().is_err());
        assert!(SolverConfig::default().validate().is_ok());
    }

    fn short_config(iterations: u64, seed: u64) -> SolverConfig {
        SolverConfig { iterations, seed, record_every: 5, ..SolverConfig::default() }
    }

    #[test]
    fn gan_with_zero_weight_matches_gidc_bitwise() {
        let (patterns, signal, _) = setup(16, 0.5);
        let config =
            SolverConfig { adversarial_weight: 0.0, ..short_config(40, 3) };
        let a = gan_solve(&patterns, &signal, &config, None).unwrap();
        let b = gidc_solve(&patterns, &signal, &config, None).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.trace, b.trace);
    }

    #[test]
    fn solver_is_deterministic() {
        let (patterns, signal, _) = setup(16, 0.5);
        let config = short_config(25, 11);
        let a = gan_solve(&patterns, &signal, &config, None).unwrap();
        let b = gan_solve(&patterns, &signal, &config, None).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.trace, b.trace);
    }

    #[test]
    fn loss_decreases_on_small_problem() {
        let (patterns, signal, truth) = setup(16, 0.6);
        let config = short_config(150, 2);
        let out = gidc_solve(&patterns, &signal, &config, Some(&truth)).unwrap();
        let first = out.trace.rows.first().unwrap();
        let last = out.trace.last().unwrap();
        assert!(last.mse_term < 0.2 * first.mse_term,
            "misfit should drop substantially: {} -> {}", first.mse_term, last.mse_term);
        assert!(out.image.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(last.psnr_db.unwrap().is_finite());
    }

    #[test]
    fn adversarial_run_trains_both_networks() {
        let (patterns, signal, _) = setup(16, 0.5);
        let config = short_config(30, 5);
        let out = gan_solve(&patterns, &signal, &config, None).unwrap();
        let rows = &out.trace.rows;
        assert!(rows.iter().all(|r| r.loss.is_finite() && r.disc_loss.is_finite()));
        assert!(rows.iter().any(|r| r.adv_term != 0.0));
        let first = rows.first().unwrap();
        let last = rows.last().unwrap();
        assert!(last.mse_term < first.mse_term);
    }

    #[test]
    fn scale_equivariance_for_power_of_two_factors() {
        // Mean normalization maps c*I to the same vector exactly when c is a
        // power of two (the division is exact in binary floating point), so
        // the whole run is bit-identical.
        let (patterns, signal, _) = setup(16, 0.5);
        let config = short_config(20, 9);
        let base = gan_solve(&patterns, &signal, &config, None).unwrap();
        for c in [0.5, 2.0, 4.0, 1024.0] {
            let scaled = BucketSignal {
                values: signal.values.iter().map(|v| c * v).collect(),
                channel_index: signal.channel_index,
                wavelength: signal.wavelength,
            };
            let out = gan_solve(&patterns, &scaled, &config, None).unwrap();
            assert_eq!(out.image, base.image, "scale {c}");
        }
    }

    #[test]
    fn divergence_carries_trace() {
        let (patterns, signal, _) = setup(16, 0.5);
        // Adam's step size is bounded by the learning rate, so the reliable
        // way to blow up the round is an astronomical adversarial weight: the
        // weighted term's backward pass overflows at the first generator step.
        let config = SolverConfig {
            adversarial_weight: 1e308,
            record_every: 1,
            ..short_config(10, 1)
        };
        match gan_solve(&patterns, &signal, &config, None) {
            Err(Error::SolveDiverged { iteration, trace }) => {
                assert!(!trace.is_empty());
                assert_eq!(trace.last().unwrap().iteration, iteration);
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn trace_csv_round_trip_format() {
        let trace = SolveTrace {
            rows: vec![
                TraceRow {
                    iteration: 0,
                    loss: 2.5,
                    mse_term: 2.0,
                    adv_term: 0.5,
                    disc_loss: 1.2,
                    psnr_db: Some(f64::INFINITY),
                    ssim: Some(1.0),
                },
                TraceRow {
                    iteration: 10,
                    loss: 1.0,
                    mse_term: 1.0,
                    adv_term: 0.0,
                    disc_loss: 0.0,
                    psnr_db: None,
                    ssim: None,
                },
            ],
        };
        let mut buf = Vec::new();
        trace.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "iteration,loss,mse_term,adv_term,disc_loss,psnr_db,ssim");
        assert_eq!(lines.next().unwrap(), "0,2.5,2,0.5,1.2,inf,1");
        assert_eq!(lines.next().unwrap(), "10,1,1,0,0,,");
        assert!(lines.next().is_none());
    }

    #[test]
    fn carried_discriminator_round_trip() {
        let (patterns, signal, _) = setup(16, 0.5);
        let config = short_config(10, 4);
        let (_, disc) = gan_solve_carrying(&patterns, &signal, &config, None, None).unwrap();
        let disc = disc.expect("adversarial run returns its discriminator");
        let before = disc.params().to_vec();
        let (_, disc2) =
            gan_solve_carrying(&patterns, &signal, &config, None, Some(disc)).unwrap();
        let after = disc2.unwrap();
        assert_ne!(before, after.params(), "carried critic keeps training");

        let other = PatternSet::generate(16, 0.25, Ordering::Sequency).unwrap();
        let other_sig = measure(&crate::fixtures::cross(16), &other).unwrap();
        let carried = Discriminator::new(patterns.m(), 0).unwrap();
        assert!(gan_solve_carrying(&other, &other_sig, &config, None, Some(carried)).is_err());
    }
}
