//! Non-neural baselines: differential ghost imaging and a TV-regularized
//! least-squares solver (a TVAL3-class baseline).

use crate::forward::BucketSignal;
use crate::patterns::PatternSet;
use crate::tensor::axpy;
use crate::{Error, Result};

/// Charbonnier smoothing width for the TV term.
const TV_EPS: f64 = 1e-6;

/// Differential ghost imaging output.
#[derive(Debug, Clone, PartialEq)]
pub struct DgiResult {
    /// Reconstruction min-max normalized to `[0,1]`; all zeros when the raw
    /// estimate is constant.
    pub image: Vec<f64>,
    /// (min, max) of the raw estimate, so `raw = image * (max - min) + min`.
    pub normalization: (f64, f64),
}

/// Differential ghost imaging: correlates bucket values with the displayed
/// patterns and subtracts the conventional-GI background term,
/// `mean_m(pattern_m * I_m) - (mean(S*I) / mean(S)) * mean_m(pattern_m)`,
/// where `S_m` is the pixel sum of pattern m. Per-pixel means run over the
/// m selected patterns; the result is min-max normalized.
pub fn dgi(patterns: &PatternSet, signal: &BucketSignal) -> Result<DgiResult> {
    let m = patterns.m();
    if signal.values.len() != m {
        return Err(Error::ShapeMismatch {
            op: "dgi",
            detail: format!("signal has {} samples, pattern set has {m}", signal.values.len()),
        });
    }
    let sums = patterns.sums();
    let mean_s = sums.iter().map(|&s| s as f64).sum::<f64>() / m as f64;
    if mean_s == 0.0 {
        return Err(Error::InvalidArgument(
            "mean pattern sum is zero (all patterns empty); cannot correlate".into(),
        ));
    }
    let mean_si = sums
        .iter()
        .zip(&signal.values)
        .map(|(&s, &i)| s as f64 * i)
        .sum::<f64>()
        / m as f64;

    let n2 = patterns.n2();
    // raw = (1/M) * P^T I - (mean(S*I)/mean(S)) * (1/M) * P^T 1, fused into
    // one accumulation with per-row coefficient (I_m - mean(S*I)/mean(S)) / M.
    let background = mean_si / mean_s;
    let mut raw = vec![0.0; n2];
    for r in 0..m {
        axpy((signal.values[r] - background) / m as f64, patterns.row(r), &mut raw);
    }

    let (min, max) = min_max(&raw);
    let image = if max > min {
        raw.iter().map(|v| (v - min) / (max - min)).collect()
    } else {
        vec![0.0; n2]
    };
    Ok(DgiResult { image, normalization: (min, max) })
}

fn min_max(values: &[f64]) -> (f64, f64) {
    values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    })
}

/// Default TV weight: a tenth of the largest back-projected signal entry,
/// floored so it stays positive even for an all-zero signal.
pub fn default_tv_lambda(patterns: &PatternSet, signal: &BucketSignal) -> f64 {
    let mut back = vec![0.0; patterns.n2()];
    for r in 0..patterns.m().min(signal.values.len()) {
        axpy(signal.values[r], patterns.row(r), &mut back);
    }
    let max_abs = back.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    (0.1 * max_abs).max(1e-12)
}

/// TV-regularized reconstruction by projected gradient descent with a
/// backtracking line search: minimizes `||P x - I||^2 + lambda * TV(x)` over
/// `x in [0,1]`, where TV is anisotropic with Charbonnier smoothing
/// (`sqrt(d^2 + eps^2) - eps`, exactly zero for a constant plane).
///
/// Backtracking only accepts non-increasing objectives, so the method cannot
/// oscillate; it stops early at a stationary point when no decrease is
/// possible at any step size.
pub fn tv_reconstruct(
    patterns: &PatternSet,
    signal: &BucketSignal,
    lambda_tv: f64,
    iters: usize,
) -> Result<Vec<f64>> {
    let m = patterns.m();
    if signal.values.len() != m {
        return Err(Error::ShapeMismatch {
            op: "tv_reconstruct",
            detail: format!("signal has {} samples, pattern set has {m}", signal.values.len()),
        });
    }
    if !(lambda_tv.is_finite() && lambda_tv > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "TV weight must be a positive real, got {lambda_tv}"
        )));
    }
    if iters == 0 {
        return Err(Error::InvalidArgument("iters must be >= 1".into()));
    }

    let n = patterns.n();
    let n2 = patterns.n2();
    let mut x = vec![0.0; n2];
    let mut projected = vec![0.0; m];
    let mut objective = tv_objective_with(&projected, &signal.values, &x, n, lambda_tv);
    if !objective.is_finite() {
        return Err(Error::TvDiverged { iteration: 0 });
    }

    let mut step = 1.0;
    let mut grad = vec![0.0; n2];
    for iteration in 0..iters {
        grad.iter_mut().for_each(|g| *g = 0.0);
        for r in 0..m {
            axpy(2.0 * (projected[r] - signal.values[r]), patterns.row(r), &mut grad);
        }
        add_tv_gradient(&x, n, lambda_tv, &mut grad);

        let mut accepted = false;
        for _ in 0..60 {
            let candidate: Vec<f64> =
                x.iter().zip(&grad).map(|(xi, gi)| (xi - step * gi).clamp(0.0, 1.0)).collect();
            let cand_projected = patterns.project(&candidate);
            let cand_objective =
                tv_objective_with(&cand_projected, &signal.values, &candidate, n, lambda_tv);
            if !cand_objective.is_finite() {
                return Err(Error::TvDiverged { iteration });
            }
            if cand_objective <= objective {
                x = candidate;
                projected = cand_projected;
                objective = cand_objective;
                step *= 1.8;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break; // stationary to machine precision
        }
    }
    Ok(x)
}

/// Objective value given the already-projected signal for `x`.
fn tv_objective_with(projected: &[f64], measured: &[f64], x: &[f64], n: usize, lambda: f64) -> f64 {
    let misfit: f64 = projected
        .iter()
        .zip(measured)
        .map(|(p, i)| (p - i) * (p - i))
        .sum();
    misfit + lambda * tv_smooth(x, n)
}

/// Anisotropic Charbonnier TV, shifted so a constant plane scores exactly 0.
pub(crate) fn tv_smooth(x: &[f64], n: usize) -> f64 {
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n - 1 {
            let d = x[i * n + j + 1] - x[i * n + j];
            total += (d * d + TV_EPS * TV_EPS).sqrt() - TV_EPS;
        }
    }
    for i in 0..n - 1 {
        for j in 0..n {
            let d = x[(i + 1) * n + j] - x[i * n + j];
            total += (d * d + TV_EPS * TV_EPS).sqrt() - TV_EPS;
        }
    }
    total
}

fn add_tv_gradient(x: &[f64], n: usize, lambda: f64, grad: &mut [f64]) {
    for i in 0..n {
        for j in 0..n - 1 {
            let d = x[i * n + j + 1] - x[i * n + j];
            let w = lambda * d / (d * d + TV_EPS * TV_EPS).sqrt();
            grad[i * n + j + 1] += w;
            grad[i * n + j] -= w;
        }
    }
    for i in 0..n - 1 {
        for j in 0..n {
            let d = x[(i + 1) * n + j] - x[i * n + j];
            let w = lambda * d / (d * d + TV_EPS * TV_EPS).sqrt();
            grad[(i + 1) * n + j] += w;
            grad[i * n + j] -= w;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::measure;
    use crate::patterns::Ordering;
    use crate::rng::{stream, Role};
    use rand::Rng;

    fn rand_image(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = stream(seed, Role::InputNoise);
        (0..n * n).map(|_| rng.gen::<f64>()).collect()
    }

    fn signal_of(values: Vec<f64>) -> BucketSignal {
        BucketSignal { values, channel_index: 0, wavelength: None }
    }

    #[test]
    fn uniform_object_with_equal_sums_cancels() {
        // Rows 1..9 of the order-16 transform all have pixel sum 8; with the
        // flat row omitted, a uniform object makes both correlation terms
        // identical and the raw estimate vanishes.
        let patterns = PatternSet::from_rows(4, &[1, 2, 3, 4, 5, 6, 7, 8]).unwrap();
        assert!(patterns.sums().iter().all(|&s| s == 8));
        let o = 0.7;
        let signal = measure(&vec![o; 16], &patterns).unwrap();
        let result = dgi(&patterns, &signal).unwrap();
        let (min, max) = result.normalization;
        assert!(min.abs() < 1e-12 && max.abs() < 1e-12, "raw range [{min}, {max}]");
    }

    #[test]
    fn single_measurement_gives_zero_plane() {
        let patterns = PatternSet::generate(4, 1.0 / 16.0, Ordering::Sequency).unwrap();
        assert_eq!(patterns.m(), 1);
        let signal = signal_of(vec![3.25]);
        let result = dgi(&patterns, &signal).unwrap();
        assert_eq!(result.normalization, (0.0, 0.0));
        assert!(result.image.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_direct_formula_oracle() {
        let patterns = PatternSet::generate(4, 1.0, Ordering::Sequency).unwrap();
        let image = rand_image(4, 21);
        let signal = measure(&image, &patterns).unwrap();
        let result = dgi(&patterns, &signal).unwrap();

        let m = patterns.m() as f64;
        let mean_s = patterns.sums().iter().map(|&s| s as f64).sum::<f64>() / m;
        let mean_si = patterns
            .sums()
            .iter()
            .zip(&signal.values)
            .map(|(&s, &i)| s as f64 * i)
            .sum::<f64>()
            / m;
        let mut oracle = vec![0.0; 16];
        for p in 0..16 {
            let corr: f64 =
                (0..patterns.m()).map(|r| patterns.row(r)[p] * signal.values[r]).sum::<f64>() / m;
            let mean_pattern: f64 = (0..patterns.m()).map(|r| patterns.row(r)[p]).sum::<f64>() / m;
            oracle[p] = corr - mean_si / mean_s * mean_pattern;
        }
        let lo = oracle.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = oracle.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for (got, want_raw) in result.image.iter().zip(&oracle) {
            let want = (want_raw - lo) / (hi - lo);
            assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        }
        assert!((result.normalization.0 - lo).abs() < 1e-10);
        assert!((result.normalization.1 - hi).abs() < 1e-10);
    }

    #[test]
    fn length_mismatch_rejected() {
        let patterns = PatternSet::generate(4, 0.5, Ordering::Sequency).unwrap();
        assert!(dgi(&patterns, &signal_of(vec![1.0; 3])).is_err());
    }

    #[test]
    fn normalized_output_is_scale_invariant() {
        let patterns = PatternSet::generate(8, 0.4, Ordering::Sequency).unwrap();
        let signal = measure(&rand_image(8, 3), &patterns).unwrap();
        let base = dgi(&patterns, &signal).unwrap();

        // Power-of-two scaling is exact in binary floating point.
        let scaled = signal_of(signal.values.iter().map(|v| 4.0 * v).collect());
        assert_eq!(dgi(&patterns, &scaled).unwrap().image, base.image);

        let scaled = signal_of(signal.values.iter().map(|v| 3.0 * v).collect());
        let close = dgi(&patterns, &scaled).unwrap();
        for (a, b) in close.image.iter().zip(&base.image) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn tv_term_of_constant_plane_is_zero() {
        assert_eq!(tv_smooth(&vec![0.42; 36], 6), 0.0);
        assert_eq!(tv_smooth(&vec![0.0; 16], 4), 0.0);
        // A single step contributes roughly its height once per crossing.
        let mut plane = vec![0.0; 16];
        for i in 0..4 {
            plane[i * 4 + 2] = 1.0;
            plane[i * 4 + 3] = 1.0;
        }
        let tv = tv_smooth(&plane, 4);
        assert!((tv - 4.0).abs() < 1e-3, "{tv}");
    }

    #[test]
    fn zero_signal_reconstructs_to_zero() {
        let patterns = PatternSet::generate(8, 0.5, Ordering::Sequency).unwrap();
        let signal = signal_of(vec![0.0; patterns.m()]);
        let x = tv_reconstruct(&patterns, &signal, 0.05, 50).unwrap();
        assert!(x.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn full_sampling_recovers_least_squares_solution() {
        let patterns = PatternSet::generate(8, 1.0, Ordering::Sequency).unwrap();
        let truth: Vec<f64> = rand_image(8, 17).iter().map(|v| 0.05 + 0.9 * v).collect();
        let signal = measure(&truth, &patterns).unwrap();
        let x = tv_reconstruct(&patterns, &signal, 1e-12, 12000).unwrap();
        let worst = x.iter().zip(&truth).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(worst < 1e-3, "max abs error {worst}");
    }

    #[test]
    fn objective_is_monotone_in_iteration_budget() {
        let patterns = PatternSet::generate(8, 0.3, Ordering::Sequency).unwrap();
        let signal = measure(&rand_image(8, 29), &patterns).unwrap();
        let lambda = default_tv_lambda(&patterns, &signal);
        let mut last = f64::INFINITY;
        for iters in [1, 3, 10, 30, 100] {
            let x = tv_reconstruct(&patterns, &signal, lambda, iters).unwrap();
            let objective =
                tv_objective_with(&patterns.project(&x), &signal.values, &x, 8, lambda);
            assert!(
                objective <= last + 1e-12,
                "objective rose from {last} to {objective} at {iters} iters"
            );
            last = objective;
        }
    }

    #[test]
    fn result_stays_in_unit_box() {
        let patterns = PatternSet::generate(8, 0.3, Ordering::Sequency).unwrap();
        // A hot signal pushes the unconstrained minimizer far above 1.
        let signal = signal_of(vec![1e4; patterns.m()]);
        let x = tv_reconstruct(&patterns, &signal, 0.1, 80).unwrap();
        assert!(x.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn non_finite_objective_reports_divergence() {
        let patterns = PatternSet::generate(4, 0.5, Ordering::Sequency).unwrap();
        let mut values = vec![1.0; patterns.m()];
        values[0] = f64::NAN;
        let err = tv_reconstruct(&patterns, &signal_of(values), 0.1, 10).unwrap_err();
        assert!(matches!(err, Error::TvDiverged { .. }), "{err}");
        assert!(err.to_string().contains("smaller step"), "{err}");
    }

    #[test]
    fn default_lambda_tracks_backprojection_scale() {
        let patterns = PatternSet::generate(8, 0.5, Ordering::Sequency).unwrap();
        let signal = measure(&rand_image(8, 31), &patterns).unwrap();
        let lambda = default_tv_lambda(&patterns, &signal);
        assert!(lambda > 0.0);
        let scaled = signal_of(signal.values.iter().map(|v| 2.0 * v).collect());
        let lambda2 = default_tv_lambda(&patterns, &scaled);
        assert!((lambda2 - 2.0 * lambda).abs() < 1e-9 * lambda.max(1.0));
        // Invariant arguments: zero signal still yields a usable weight.
        let zero = default_tv_lambda(&patterns, &signal_of(vec![0.0; patterns.m()]));
        assert_eq!(zero, 1e-12);
    }

    #[test]
    fn invalid_arguments_rejected() {
        let patterns = PatternSet::generate(4, 0.5, Ordering::Sequency).unwrap();
        let signal = signal_of(vec![1.0; patterns.m()]);
        assert!(tv_reconstruct(&patterns, &signal, 0.0, 10).is_err());
        assert!(tv_reconstruct(&patterns, &signal, -1.0, 10).is_err());
        assert!(tv_reconstruct(&patterns, &signal, 0.1, 0).is_err());
        assert!(tv_reconstruct(&patterns, &signal_of(vec![1.0; 2]), 0.1, 10).is_err());
    }
}
