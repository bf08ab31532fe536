//! Image quality metrics: MSE, PSNR, and a global (single-window) SSIM.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Mean squared error between two equal-length planes.
pub fn mse(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::ShapeMismatch {
            op: "mse",
            detail: format!("{} vs {} values", a.len(), b.len()),
        });
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

/// Peak signal-to-noise ratio `10 log10(max_value^2 / MSE)` in decibels.
/// Identical planes have zero MSE and return positive infinity.
pub fn psnr(a: &[f64], b: &[f64], max_value: f64) -> Result<f64> {
    if !(max_value.is_finite() && max_value > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "peak value must be positive, got {max_value}"
        )));
    }
    let e = mse(a, b)?;
    if e == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max_value * max_value / e).log10())
}

/// Structural similarity evaluated once over the whole plane (no sliding
/// window): means, biased variances, and biased covariance feed the standard
/// two-factor formula with `c1 = (0.01 L)^2`, `c2 = (0.03 L)^2`.
pub fn ssim(a: &[f64], b: &[f64], dynamic_range: f64) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::ShapeMismatch {
            op: "ssim",
            detail: format!("{} vs {} values", a.len(), b.len()),
        });
    }
    if !(dynamic_range.is_finite() && dynamic_range > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "dynamic range must be positive, got {dynamic_range}"
        )));
    }
    let n = a.len() as f64;
    let mu_a = a.iter().sum::<f64>() / n;
    let mu_b = b.iter().sum::<f64>() / n;
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    let mut cov = 0.0;
    for (x, y) in a.iter().zip(b) {
        let da = x - mu_a;
        let db = y - mu_b;
        var_a += da * da;
        var_b += db * db;
        cov += da * db;
    }
    var_a /= n;
    var_b /= n;
    cov /= n;

    let c1 = (0.01 * dynamic_range) * (0.01 * dynamic_range);
    let c2 = (0.03 * dynamic_range) * (0.03 * dynamic_range);
    Ok(((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
        / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)))
}

/// Min-max normalization to `[0,1]`; a constant plane maps to all zeros.
pub fn normalize_unit(plane: &[f64]) -> Vec<f64> {
    let lo = plane.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = plane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        plane.iter().map(|v| (v - lo) / (hi - lo)).collect()
    } else {
        vec![0.0; plane.len()]
    }
}

/// All three metrics for one reconstruction/reference pair. PSNR may be
/// positive infinity; it serializes as the string `"inf"` so the JSON stays
/// valid and loss-free.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub mse: f64,
    #[serde(
        serialize_with = "ser_maybe_infinite",
        deserialize_with = "de_maybe_infinite"
    )]
    pub psnr_db: f64,
    pub ssim: f64,
}

/// Computes MSE, PSNR, and SSIM with one shared peak/dynamic-range value.
pub fn quality(reconstruction: &[f64], reference: &[f64], peak: f64) -> Result<QualityReport> {
    Ok(QualityReport {
        mse: mse(reconstruction, reference)?,
        psnr_db: psnr(reconstruction, reference, peak)?,
        ssim: ssim(reconstruction, reference, peak)?,
    })
}

fn ser_maybe_infinite<S: serde::Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() {
        s.serialize_str(if *v > 0.0 { "inf" } else { "-inf" })
    } else {
        s.serialize_f64(*v)
    }
}

fn de_maybe_infinite<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    use serde::de::Error as _;
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum NumberOrText {
        Number(f64),
        Text(String),
    }
    match NumberOrText::deserialize(d)? {
        NumberOrText::Number(v) => Ok(v),
        NumberOrText::Text(t) => match t.as_str() {
            "inf" => Ok(f64::INFINITY),
            "-inf" => Ok(f64::NEG_INFINITY),
            other => Err(D::Error::custom(format!("expected number, \"inf\" or \"-inf\", got {other:?}"))),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Role};
    use proptest::prelude::*;
    use rand::Rng;

    fn rand_plane(len: usize, seed: u64) -> Vec<f64> {
        let mut rng = stream(seed, Role::InputNoise);
        (0..len).map(|_| rng.gen::<f64>()).collect()
    }

    #[test]
    fn mse_is_a_mean() {
        let a = [0.0, 0.0, 0.0, 0.0];
        let b = [1.0, 0.0, 0.0, 0.0];
        assert_eq!(mse(&a, &b).unwrap(), 0.25);
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        assert!(mse(&a, &b[..3]).is_err());
        assert!(mse(&[], &[]).is_err());
    }

    #[test]
    fn psnr_reference_points() {
        // Uniform error of 0.5 on a unit-peak image.
        let a = vec![0.5; 8];
        let b = vec![0.0; 8];
        let v = psnr(&a, &b, 1.0).unwrap();
        assert!((v - 6.020599913279624).abs() < 1e-9, "{v}");

        // Unit MSE against an 8-bit peak.
        let a = vec![1.0; 4];
        let b = vec![0.0; 4];
        let v = psnr(&a, &b, 255.0).unwrap();
        assert!((v - 48.1308036086791).abs() < 1e-9, "{v}");

        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        assert!(psnr(&a, &b, 0.0).is_err());
        assert!(psnr(&a, &b, -1.0).is_err());
    }

    #[test]
    fn psnr_strictly_decreases_with_mse() {
        let mut last = f64::INFINITY;
        for k in 1..20 {
            let err = k as f64 * 0.01;
            let a = vec![err; 16];
            let b = vec![0.0; 16];
            let v = psnr(&a, &b, 1.0).unwrap();
            assert!(v < last, "psnr {v} did not drop below {last}");
            last = v;
        }
    }

    #[test]
    fn ssim_reference_points() {
        let a = vec![0.5; 64];
        let b = vec![0.25; 64];
        let v = ssim(&a, &b, 1.0).unwrap();
        // (2*0.125 + 1e-4)(9e-4) / ((0.25+0.0625+1e-4)(9e-4))
        assert!((v - 0.2501 / 0.3126).abs() < 1e-12, "{v}");
        assert!((v - 0.8001).abs() < 1e-4, "{v}");

        assert!((ssim(&a, &a, 1.0).unwrap() - 1.0).abs() < 1e-15);
        let anti: Vec<f64> = (0..64).map(|i| if i % 2 == 0 { 1.0 } else { 0.0 }).collect();
        let flipped: Vec<f64> = anti.iter().map(|v| 1.0 - v).collect();
        let opposed = ssim(&anti, &flipped, 1.0).unwrap();
        assert!(opposed < 0.0, "anti-correlated planes score {opposed}");
    }

    #[test]
    fn metrics_are_symmetric() {
        let a = rand_plane(100, 1);
        let b = rand_plane(100, 2);
        assert_eq!(mse(&a, &b).unwrap(), mse(&b, &a).unwrap());
        assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
        assert_eq!(ssim(&a, &b, 1.0).unwrap(), ssim(&b, &a, 1.0).unwrap());
    }

    #[test]
    fn normalize_unit_maps_to_unit_range() {
        let v = normalize_unit(&[2.0, 4.0, 3.0]);
        assert_eq!(v, vec![0.0, 1.0, 0.5]);
        assert_eq!(normalize_unit(&[1.7, 1.7]), vec![0.0, 0.0]);
        let plane = rand_plane(50, 3);
        let n = normalize_unit(&plane);
        assert!(n.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(n.iter().any(|&v| v == 0.0) && n.iter().any(|&v| v == 1.0));
    }

    #[test]
    fn quality_report_serializes_infinity() {
        let report = quality(&[0.5; 4], &[0.5; 4], 1.0).unwrap();
        assert_eq!(report.mse, 0.0);
        assert_eq!(report.psnr_db, f64::INFINITY);
        let json = serde_json::to_string(&report).unwrap();
        assert!(json.contains("\"psnr_db\":\"inf\""), "{json}");
        let back: QualityReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);

        let finite = quality(&[0.5; 4], &[0.25; 4], 1.0).unwrap();
        let json = serde_json::to_string(&finite).unwrap();
        let back: QualityReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, finite);
    }

    proptest! {
        #[test]
        fn ssim_stays_in_closed_unit_interval(seed in 0u64..500) {
            let a = rand_plane(36, seed * 2 + 1);
            let b = rand_plane(36, seed * 2 + 2);
            let v = ssim(&a, &b, 1.0).unwrap();
            prop_assert!((-1.0..=1.0).contains(&v), "ssim {v}");
        }

        #[test]
        fn mse_nonnegative_and_zero_iff_equal(seed in 0u64..500) {
            let a = rand_plane(25, seed + 1000);
            let v = mse(&a, &a).unwrap();
            prop_assert_eq!(v, 0.0);
            let mut b = a.clone();
            b[(seed as usize) % 25] += 0.5;
            prop_assert!(mse(&a, &b).unwrap() > 0.0);
        }
    }
}
