//! Hyperspectral cubes: a stack of same-sized image planes, one per
//! wavelength, with a checksummed on-disk format.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::format::{expect_eof, f64_bytes, field, parse_kv, read_f64_block, read_line, read_u64_le, write_f64_block};
use crate::hash::fnv1a64;
use crate::{Error, Result};

/// Magic token opening the cube file header line.
const CUBE_MAGIC: &str = "SPI-CUBE-V1";

/// A spectral data cube: `channels` planes of N×N intensities in `[0,1]`,
/// each tagged with a wavelength in nanometres. Wavelengths are strictly
/// increasing, so channel index and spectral position are interchangeable.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralCube {
    n: usize,
    wavelengths: Vec<f64>,
    /// Channel-major planes: plane c occupies `[c*n*n, (c+1)*n*n)`.
    planes: Vec<f64>,
}

impl SpectralCube {
    pub fn new(n: usize, wavelengths: Vec<f64>, planes: Vec<f64>) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("cube side must be >= 1".into()));
        }
        if wavelengths.is_empty() {
            return Err(Error::InvalidArgument("cube needs at least one channel".into()));
        }
        if let Some(w) = wavelengths.windows(2).find(|w| !(w[0] < w[1])) {
            return Err(Error::InvalidArgument(format!(
                "wavelengths must be strictly increasing, got {} then {}",
                w[0], w[1]
            )));
        }
        if !wavelengths.iter().all(|w| w.is_finite()) {
            return Err(Error::InvalidArgument("wavelengths must be finite".into()));
        }
        if planes.len() != wavelengths.len() * n * n {
            return Err(Error::LengthMismatch(format!(
                "cube payload has {} values, expected {} channels x {n}x{n}",
                planes.len(),
                wavelengths.len()
            )));
        }
        if let Some(&v) = planes.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!(
                "cube intensities must lie in [0,1], got {v}"
            )));
        }
        Ok(SpectralCube { n, wavelengths, planes })
    }

    /// Builds a cube from per-channel planes in wavelength order.
    pub fn from_channels(n: usize, wavelengths: Vec<f64>, channels: &[Vec<f64>]) -> Result<Self> {
        let mut planes = Vec::with_capacity(channels.len() * n * n);
        for c in channels {
            planes.extend_from_slice(c);
        }
        Self::new(n, wavelengths, planes)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn channels(&self) -> usize {
        self.wavelengths.len()
    }

    pub fn wavelengths(&self) -> &[f64] {
        &self.wavelengths
    }

    /// Flat N² plane of channel `c`.
    pub fn plane(&self, c: usize) -> &[f64] {
        let n2 = self.n * self.n;
        &self.planes[c * n2..(c + 1) * n2]
    }

    /// Intensity at pixel (u, v) for every channel, in wavelength order.
    /// (u, v) are row and column; out-of-bounds coordinates are an error.
    pub fn pixel_trace(&self, u: usize, v: usize) -> Result<Vec<(f64, f64)>> {
        if u >= self.n || v >= self.n {
            return Err(Error::InvalidArgument(format!(
                "pixel ({u}, {v}) outside {0}x{0} plane",
                self.n
            )));
        }
        Ok((0..self.channels())
            .map(|c| (self.wavelengths[c], self.plane(c)[u * self.n + v]))
            .collect())
    }

    /// Writes the cube: one text header line (magic, side, channel count,
    /// wavelength digest), the wavelengths and planes as little-endian f64
    /// blocks, then a checksum of everything before it.
    pub fn save<W: Write>(&self, mut w: W) -> Result<()> {
        let mut out = Vec::new();
        let wl_digest = fnv1a64(&f64_bytes(&self.wavelengths));
        writeln!(
            out,
            "{CUBE_MAGIC} n={} channels={} wl_digest={wl_digest:016x}",
            self.n,
            self.channels()
        )?;
        write_f64_block(&mut out, &self.wavelengths)?;
        write_f64_block(&mut out, &self.planes)?;
        let checksum = fnv1a64(&out);
        out.extend_from_slice(&checksum.to_le_bytes());
        w.write_all(&out)?;
        Ok(())
    }

    pub fn save_path<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.save(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load<R: Read>(mut r: R) -> Result<Self> {
        let line = read_line(&mut r)?;
        let Some(rest) = line.strip_prefix(CUBE_MAGIC) else {
            return Err(Error::BadMagic { expected: CUBE_MAGIC });
        };
        let fields = parse_kv(rest)?;
        let n: usize = field(&fields, "n")?;
        let channels: usize = field(&fields, "channels")?;
        let stored_wl_digest = u64::from_str_radix(&field::<String>(&fields, "wl_digest")?, 16)
            .map_err(|e| Error::BadHeader(format!("wl_digest: {e}")))?;
        if n == 0 || channels == 0 {
            return Err(Error::BadHeader(format!("degenerate cube {channels} x {n}x{n}")));
        }
        // Guard the multiplication so a corrupt header cannot request an
        // absurd allocation.
        let payload = channels
            .checked_mul(n)
            .and_then(|v| v.checked_mul(n))
            .filter(|&v| v <= (1 << 34))
            .ok_or_else(|| Error::BadHeader(format!("implausible cube size {channels} x {n}x{n}")))?;

        let wavelengths = read_f64_block(&mut r, channels, "wavelength block")?;
        let computed_wl_digest = fnv1a64(&f64_bytes(&wavelengths));
        if computed_wl_digest != stored_wl_digest {
            return Err(Error::ChecksumMismatch {
                stored: stored_wl_digest,
                computed: computed_wl_digest,
            });
        }
        let planes = read_f64_block(&mut r, payload, "plane block")?;

        let mut preceding = Vec::new();
        writeln!(
            preceding,
            "{CUBE_MAGIC} n={n} channels={channels} wl_digest={stored_wl_digest:016x}"
        )?;
        write_f64_block(&mut preceding, &wavelengths)?;
        write_f64_block(&mut preceding, &planes)?;
        let computed = fnv1a64(&preceding);
        let stored = read_u64_le(&mut r, "trailing checksum")?;
        if stored != computed {
            return Err(Error::ChecksumMismatch { stored, computed });
        }
        expect_eof(&mut r, "cube file")?;
        Self::new(n, wavelengths, planes)
    }

    pub fn load_path<P: AsRef<Path>>(path: P) -> Result<Self> {
        Self::load(BufReader::new(File::open(path)?))
    }
}

/// Synthesizes a cube from one base plane and a spectral transmission
/// profile: channel c is `clamp(profile(wavelength_c) * base, 0, 1)`. The
/// profile must return values in `[0,1]`.
pub fn synth_cube(
    base: &[f64],
    n: usize,
    wavelengths: &[f64],
    profile: impl Fn(f64) -> f64,
) -> Result<SpectralCube> {
    if base.len() != n * n {
        return Err(Error::LengthMismatch(format!(
            "base plane has {} values, expected {}",
            base.len(),
            n * n
        )));
    }
    let mut planes = Vec::with_capacity(wavelengths.len() * n * n);
    for &wl in wavelengths {
        let t = profile(wl);
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::InvalidArgument(format!(
                "transmission profile returned {t} at {wl} nm, outside [0,1]"
            )));
        }
        planes.extend(base.iter().map(|&v| (t * v).clamp(0.0, 1.0)));
    }
    SpectralCube::new(n, wavelengths.to_vec(), planes)
}
