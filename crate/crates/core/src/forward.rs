//! Single-pixel forward model: bucket measurements, noise, and signal files.
//!
//! Displaying pattern m while a photodiode integrates the transmitted light
//! yields one scalar per pattern, the inner product of the pattern with the
//! scene. The measurement is linear, so it lives both as a plain function
//! ([`measure`]) and as a differentiable tape op ([`Tape::measure`]).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cube::SpectralCube;
use crate::format::{expect_eof, read_f64_block, read_line, write_f64_block};
use crate::patterns::PatternSet;
use crate::rng::{channel_seed, stream, Role};
use crate::tensor::{Node, Op, Tape, TensorRef};
use crate::{Error, Result};

/// Magic value in the binary signal file header.
const SIGNAL_MAGIC: &str = "SPI-SIGNAL-V1";

/// One channel's bucket measurements: `values[i]` is the detector reading
/// for the i-th selected pattern.
#[derive(Debug, Clone, PartialEq)]
pub struct BucketSignal {
    pub values: Vec<f64>,
    /// Position of this channel in its cube; 0 for single-plane captures.
    pub channel_index: usize,
    /// Wavelength tag in nanometres, when the capture came from a cube.
    pub wavelength: Option<f64>,
}

/// Where noise enters the acquisition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    /// Noiseless acquisition.
    None,
    /// Additive white Gaussian noise on the image plane before measurement,
    /// sigma relative to an image maximum of 1; the noisy image is clamped
    /// back to `[0,1]`.
    ImageAwgn,
    /// Additive white Gaussian noise on the bucket values, sigma relative to
    /// the signal's root mean square.
    BucketAwgn,
}

/// Noise model applied during acquisition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub kind: NoiseKind,
    pub sigma: f64,
}

impl NoiseModel {
    pub fn none() -> Self {
        NoiseModel { kind: NoiseKind::None, sigma: 0.0 }
    }

    pub fn image_awgn(sigma: f64) -> Result<Self> {
        Self::validated(NoiseKind::ImageAwgn, sigma)
    }

    pub fn bucket_awgn(sigma: f64) -> Result<Self> {
        Self::validated(NoiseKind::BucketAwgn, sigma)
    }

    fn validated(kind: NoiseKind, sigma: f64) -> Result<Self> {
        if !(sigma.is_finite() && sigma >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "noise sigma must be finite and >= 0, got {sigma}"
            )));
        }
        Ok(NoiseModel { kind, sigma })
    }

    /// Image-domain noise. Draws come from the measurement-noise stream of
    /// `seed`, so the same seed reproduces the same corruption.
    pub fn apply_to_image(&self, image: &[f64], seed: u64) -> Vec<f64> {
        match self.kind {
            NoiseKind::ImageAwgn => {
                let mut rng = stream(seed, Role::MeasurementNoise);
                let normal = Normal::new(0.0, self.sigma).expect("validated sigma");
                image.iter().map(|&v| (v + normal.sample(&mut rng)).clamp(0.0, 1.0)).collect()
            }
            _ => image.to_vec(),
        }
    }

    /// Detector-domain noise, scaled by the signal's root mean square so
    /// `sigma` stays meaningful across sampling ratios.
    pub fn apply_to_signal(&self, signal: &[f64], seed: u64) -> Vec<f64> {
        match self.kind {
            NoiseKind::BucketAwgn => {
                let rms = (signal.iter().map(|v| v * v).sum::<f64>()
                    / signal.len().max(1) as f64)
                    .sqrt();
                let mut rng = stream(seed, Role::MeasurementNoise);
                let normal = Normal::new(0.0, self.sigma * rms).expect("validated sigma");
                signal.iter().map(|&v| v + normal.sample(&mut rng)).collect()
            }
            _ => signal.to_vec(),
        }
    }
}

impl Default for NoiseModel {
    /// Image-plane noise at sigma 0.05, the standard simulated corruption.
    fn default() -> Self {
        NoiseModel { kind: NoiseKind::ImageAwgn, sigma: 0.05 }
    }
}

/// Measures a flat N² image with every pattern in the set. The operator is
/// linear and exact in f64; image values are not range-checked because the
/// measurement applies to any real-valued plane.
pub fn measure(image: &[f64], patterns: &PatternSet) -> Result<BucketSignal> {
    let n2 = patterns.n() * patterns.n();
    if image.len() != n2 {
        return Err(Error::ShapeMismatch {
            op: "measure",
            detail: format!("image has {} values, pattern side wants {n2}", image.len()),
        });
    }
    Ok(BucketSignal { values: patterns.project(image), channel_index: 0, wavelength: None })
}

impl Tape {
    /// Differentiable bucket measurement: maps an N² tensor to the m bucket
    /// values. The pattern matrix is shared, not copied, onto the tape.
    pub fn measure(&mut self, x: TensorRef, patterns: &PatternSet) -> Result<TensorRef> {
        let n2 = patterns.n() * patterns.n();
        let shape = self.shape(x).to_vec();
        if shape.iter().product::<usize>() != n2 {
            return Err(Error::ShapeMismatch {
                op: "measure",
                detail: format!("input shape {shape:?}, pattern side wants {n2} values"),
            });
        }
        let values = patterns.project(self.values(x));
        let m = patterns.m();
        let requires_grad = self.requires(x);
        Ok(self.push(Node {
            op: Op::Measure { x, matrix: patterns.matrix_arc(), m },
            shape: vec![m],
            values,
            requires_grad,
            grad: None,
        }))
    }
}

/// Acquires every channel of a cube with one shared pattern set: noise on
/// the plane, measurement, then noise on the buckets. Channel c uses the
/// deterministic seed `channel_seed(base_seed, c)`, so acquisitions are
/// independent of processing order.
pub fn acquire_cube(
    cube: &SpectralCube,
    patterns: &PatternSet,
    noise: &NoiseModel,
    base_seed: u64,
) -> Result<Vec<BucketSignal>> {
    if cube.n() != patterns.n() {
        return Err(Error::ShapeMismatch {
            op: "acquire_cube",
            detail: format!("cube side {} vs pattern side {}", cube.n(), patterns.n()),
        });
    }
    (0..cube.channels())
        .map(|c| {
            let seed = channel_seed(base_seed, c);
            let plane = noise.apply_to_image(cube.plane(c), seed);
            let mut signal = measure(&plane, patterns)?;
            signal.values = noise.apply_to_signal(&signal.values, seed);
            signal.channel_index = c;
            signal.wavelength = Some(cube.wavelengths()[c]);
            Ok(signal)
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct SignalHeader {
    magic: String,
    channel: usize,
    wavelength: Option<f64>,
    m: usize,
}

impl BucketSignal {
    /// Writes the human-readable form: a `#` header with channel, wavelength
    /// and count, then one value per line. Values survive the round trip
    /// bit-exactly because the shortest decimal form re-parses to the same
    /// float.
    pub fn save_text<W: Write>(&self, mut w: W) -> Result<()> {
        let wl = match self.wavelength {
            Some(v) => format!("{v}"),
            None => "none".into(),
        };
        writeln!(w, "# channel={} wavelength={} m={}", self.channel_index, wl, self.values.len())?;
        for v in &self.values {
            writeln!(w, "{v}")?;
        }
        Ok(())
    }

    /// Writes the compact form: one JSON header line, then the values as a
    /// little-endian f64 block.
    pub fn save_binary<W: Write>(&self, mut w: W) -> Result<()> {
        let header = SignalHeader {
            magic: SIGNAL_MAGIC.into(),
            channel: self.channel_index,
            wavelength: self.wavelength,
            m: self.values.len(),
        };
        let mut line = serde_json::to_string(&header)?;
        line.push('\n');
        w.write_all(line.as_bytes())?;
        write_f64_block(&mut w, &self.values)?;
        Ok(())
    }

    /// Reads either signal form, telling them apart by the first byte
    /// (`#` for text, `{` for the JSON-headed binary block).
    pub fn load<R: Read>(mut r: R) -> Result<Self> {
        let mut first = [0u8; 1];
        r.read_exact(&mut first).map_err(|_| Error::Truncated("empty signal file".into()))?;
        match first[0] {
            b'#' => Self::load_text(r),
            b'{' => Self::load_binary(first[0], r),
            _ => Err(Error::BadMagic { expected: SIGNAL_MAGIC }),
        }
    }

    pub fn load_path<P: AsRef<Path>>(path: P) -> Result<Self> {
        Self::load(BufReader::new(File::open(path)?))
    }

    pub fn save_text_path<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.save_text(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn save_binary_path<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.save_binary(&mut w)?;
        w.flush()?;
        Ok(())
    }

    /// `r` is positioned just past the leading `#`.
    fn load_text<R: Read>(mut r: R) -> Result<Self> {
        let mut text = String::new();
        r.read_to_string(&mut text).map_err(|e| Error::BadHeader(format!("not utf-8: {e}")))?;
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Truncated("signal header".into()))?;
        let fields = crate::format::parse_kv(header)?;
        let channel: usize = crate::format::field(&fields, "channel")?;
        let m: usize = crate::format::field(&fields, "m")?;
        let wl_text: String = crate::format::field(&fields, "wavelength")?;
        let wavelength = match wl_text.as_str() {
            "none" => None,
            s => Some(
                s.parse::<f64>()
                    .map_err(|e| Error::BadHeader(format!("wavelength: {e}")))?,
            ),
        };
        let values: Vec<f64> = lines
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::BadHeader(format!("bad sample {l:?}: {e}")))
            })
            .collect::<Result<_>>()?;
        if values.len() != m {
            return Err(Error::LengthMismatch(format!(
                "signal header says {m} samples, file has {}",
                values.len()
            )));
        }
        Ok(BucketSignal { values, channel_index: channel, wavelength })
    }

    /// `first` is the already-consumed opening byte of the JSON header.
    fn load_binary<R: Read>(first: u8, mut r: R) -> Result<Self> {
        let mut line = read_line(&mut r)?;
        line.insert(0, first as char);
        let header: SignalHeader = serde_json::from_str(&line)?;
        if header.magic != SIGNAL_MAGIC {
            return Err(Error::BadMagic { expected: SIGNAL_MAGIC });
        }
        let values = read_f64_block(&mut r, header.m, "signal block")?;
        expect_eof(&mut r, "signal file")?;
        Ok(BucketSignal {
            values,
            channel_index: header.channel,
            wavelength: header.wavelength,
        })
    }
}
