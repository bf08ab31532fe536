//! Hadamard measurement patterns.
//!
//! A single-pixel camera displays one binary pattern per measurement. The
//! pattern basis here is the Sylvester-Hadamard matrix of order N² whose rows,
//! reshaped row-major to N×N, form a complete orthogonal family. Rows are
//! ranked by sequency (sign-change count) so that truncating to the first
//! m = round(sr·N²) rows keeps the low-spatial-frequency content that carries
//! most natural-image energy, then mapped from ±1 to {0,1} for the DMD.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::format::{field, parse_kv, read_line};
use crate::hash::fnv1a64;
use crate::{Error, Result};

/// Magic prefix of the pattern file format; exactly 16 bytes.
const PATTERN_MAGIC: &[u8; 16] = b"SPI-PATTERNS-V1\n";

/// Row ranking applied to the full transform before truncation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ordering {
    /// Rows in Sylvester construction order.
    Natural,
    /// Rows sorted by ascending sign-change count.
    Sequency,
}

impl fmt::Display for Ordering {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ordering::Natural => "natural",
            Ordering::Sequency => "sequency",
        })
    }
}

impl FromStr for Ordering {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "natural" => Ok(Ordering::Natural),
            "sequency" => Ok(Ordering::Sequency),
            other => Err(Error::InvalidArgument(format!("unknown ordering {other:?}"))),
        }
    }
}

/// Full ±1 Sylvester-Hadamard matrix of a given power-of-two order, stored as
/// i8 entries.
pub struct HadamardMatrix {
    order: usize,
    entries: Vec<i8>,
}

/// The Sylvester matrix of size `order` x `order`.
/// Entry (i,j) is (-1)^popcount(i & j), the closed form of the recursive
/// [[H, H], [H, -H]] doubling.
pub fn hadamard_matrix(order: usize) -> Result<HadamardMatrix> {
    if order == 0 || !order.is_power_of_two() {
        return Err(Error::InvalidArgument(format!(
            "hadamard order must be a power of two, got {order}"
        )));
    }
    let mut entries = vec![0i8; order * order];
    for i in 0..order {
        for j in 0..order {
            entries[i * order + j] = if (i & j).count_ones() % 2 == 0 { 1 } else { -1 };
        }
    }
    Ok(HadamardMatrix { order, entries })
}

/// The transform used for N×N imaging: order N², each row reshaping to one
/// N×N pattern. `n` must be a power of two.
pub fn hadamard_full(n: usize) -> Result<HadamardMatrix> {
    if n == 0 || !n.is_power_of_two() {
        return Err(Error::InvalidArgument(format!(
            "pattern side must be a power of two, got {n}"
        )));
    }
    hadamard_matrix(n * n)
}

impl HadamardMatrix {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn row(&self, r: usize) -> &[i8] {
        &self.entries[r * self.order..(r + 1) * self.order]
    }

    /// Sign changes along a row: the row's sequency.
    pub fn sign_changes(&self, r: usize) -> usize {
        self.row(r).windows(2).filter(|w| w[0] != w[1]).count()
    }
}

/// Row indices of `h` sorted by ascending sign-change count. Counts are
/// distinct across rows (each value 0..order-1 appears exactly once), so the
/// result does not depend on sort stability.
pub fn sequency_order(h: &HadamardMatrix) -> Vec<u32> {
    let mut idx: Vec<u32> = (0..h.order as u32).collect();
    let counts: Vec<usize> = (0..h.order).map(|r| h.sign_changes(r)).collect();
    idx.sort_by_key(|&r| counts[r as usize]);
    idx
}

fn row_order(h: &HadamardMatrix, ordering: Ordering) -> Vec<u32> {
    match ordering {
        Ordering::Natural => (0..h.order as u32).collect(),
        Ordering::Sequency => sequency_order(h),
    }
}

/// A selected set of binary measurement patterns.
///
/// `matrix` is the dense m × N² measurement matrix with entries in {0.0, 1.0},
/// shared behind an `Arc` so solvers can hold it on their tapes without
/// copying. `selected_indices` are the retained row numbers of the full
/// transform, in display order.
#[derive(Clone)]
pub struct PatternSet {
    n: usize,
    m: usize,
    ordering: Ordering,
    selected_indices: Vec<u32>,
    sums: Vec<u64>,
    matrix: Arc<Vec<f64>>,
}

/// Truncates the ordered transform to the first `m = round(sr * n²)` rows and
/// maps ±1 to {0,1} via (h+1)/2.
pub fn select_patterns(h: &HadamardMatrix, ordering: Ordering, sr: f64) -> Result<PatternSet> {
    if !(sr > 0.0 && sr <= 1.0) {
        return Err(Error::InvalidArgument(format!("sampling rate must be in (0,1], got {sr}")));
    }
    let n2 = h.order;
    let n = (n2 as f64).sqrt() as usize;
    debug_assert_eq!(n * n, n2);
    let m = (sr * n2 as f64).round() as usize;
    if m == 0 {
        return Err(Error::InvalidArgument(format!(
            "sampling rate {sr} selects zero of {n2} patterns"
        )));
    }
    let order = row_order(h, ordering);
    let selected_indices: Vec<u32> = order[..m].to_vec();
    let mut matrix = Vec::with_capacity(m * n2);
    let mut sums = Vec::with_capacity(m);
    for &r in &selected_indices {
        let row = h.row(r as usize);
        let mut s = 0u64;
        for &e in row {
            let bit = (e + 1) / 2;
            s += bit as u64;
            matrix.push(bit as f64);
        }
        sums.push(s);
    }
    Ok(PatternSet { n, m, ordering, selected_indices, sums, matrix: Arc::new(matrix) })
}

impl PatternSet {
    /// Builds the full transform, orders it, and selects in one step.
    pub fn generate(n: usize, sr: f64, ordering: Ordering) -> Result<Self> {
        let h = hadamard_full(n)?;
        select_patterns(&h, ordering, sr)
    }

    /// Builds a set from hand-picked transform rows, for exercising cases a
    /// prefix selection can never produce (such as omitting the flat row).
    #[cfg(test)]
    pub(crate) fn from_rows(n: usize, rows: &[u32]) -> Result<Self> {
        let h = hadamard_full(n)?;
        let mut matrix = Vec::with_capacity(rows.len() * h.order());
        let mut sums = Vec::with_capacity(rows.len());
        for &r in rows {
            let mut s = 0u64;
            for &e in h.row(r as usize) {
                let bit = (e + 1) / 2;
                s += bit as u64;
                matrix.push(bit as f64);
            }
            sums.push(s);
        }
        Ok(PatternSet {
            n,
            m: rows.len(),
            ordering: Ordering::Natural,
            selected_indices: rows.to_vec(),
            sums,
            matrix: Arc::new(matrix),
        })
    }

    /// Image side length N.
    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of selected patterns (measurements).
    pub fn m(&self) -> usize {
        self.m
    }

    /// Pattern length N².
    pub fn n2(&self) -> usize {
        self.n * self.n
    }

    pub fn ordering(&self) -> Ordering {
        self.ordering
    }

    pub fn selected_indices(&self) -> &[u32] {
        &self.selected_indices
    }

    /// Per-pattern pixel sums S_m.
    pub fn sums(&self) -> &[u64] {
        &self.sums
    }

    /// One pattern as a flat N² slice of {0.0, 1.0}.
    pub fn row(&self, i: usize) -> &[f64] {
        &self.matrix[i * self.n2()..(i + 1) * self.n2()]
    }

    /// The dense m × N² measurement matrix.
    pub fn matrix(&self) -> &[f64] {
        &self.matrix
    }

    /// Shared handle to the measurement matrix for on-tape use.
    pub fn matrix_arc(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.matrix)
    }

    /// Applies the measurement matrix to a flat N² image: one inner product
    /// per selected pattern. The image length must match N².
    pub fn project(&self, image: &[f64]) -> Vec<f64> {
        assert_eq!(image.len(), self.n2(), "project: image length != N^2");
        (0..self.m).map(|i| crate::tensor::dot(self.row(i), image)).collect()
    }

    fn indices_digest(&self) -> u64 {
        let bytes: Vec<u8> = self.selected_indices.iter().flat_map(|v| v.to_le_bytes()).collect();
        fnv1a64(&bytes)
    }

    /// Serializes as: 16-byte magic, one text header line of key=value pairs
    /// (n, m, ordering, indices digest), then each pattern row bit-packed
    /// LSB-first and padded to a byte boundary.
    pub fn save<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(PATTERN_MAGIC)?;
        writeln!(
            w,
            "n={} m={} ordering={} indices_digest={:016x}",
            self.n,
            self.m,
            self.ordering,
            self.indices_digest()
        )?;
        let n2 = self.n2();
        let row_bytes = n2.div_ceil(8);
        let mut buf = vec![0u8; row_bytes];
        for i in 0..self.m {
            buf.fill(0);
            for (j, &v) in self.row(i).iter().enumerate() {
                if v != 0.0 {
                    buf[j / 8] |= 1 << (j % 8);
                }
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn save_path<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        self.save(BufWriter::new(File::create(path)?))
    }

    /// Reads a pattern file back. The selected indices are recomputed from
    /// (n, ordering, m) and verified against the stored digest, so a file
    /// whose header lies about its ordering fails loudly.
    pub fn load<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 16];
        r.read_exact(&mut magic).map_err(|_| Error::BadMagic { expected: "pattern" })?;
        if &magic != PATTERN_MAGIC {
            return Err(Error::BadMagic { expected: "pattern" });
        }
        let header = read_line(&mut r)?;
        let fields = parse_kv(&header)?;
        let n: usize = field(&fields, "n")?;
        let m: usize = field(&fields, "m")?;
        let ordering: Ordering = fields
            .iter()
            .find(|(k, _)| k == "ordering")
            .ok_or_else(|| Error::BadHeader("missing key ordering".into()))?
            .1
            .parse()?;
        let stored_digest = u64::from_str_radix(
            &fields
                .iter()
                .find(|(k, _)| k == "indices_digest")
                .ok_or_else(|| Error::BadHeader("missing key indices_digest".into()))?
                .1,
            16,
        )
        .map_err(|e| Error::BadHeader(format!("indices_digest: {e}")))?;
        if n == 0 || !n.is_power_of_two() {
            return Err(Error::BadHeader(format!("side {n} is not a power of two")));
        }
        let n2 = n * n;
        if m == 0 || m > n2 {
            return Err(Error::BadHeader(format!("m={m} out of range for n²={n2}")));
        }

        let row_bytes = n2.div_ceil(8);
        let mut packed = vec![0u8; m * row_bytes];
        r.read_exact(&mut packed)
            .map_err(|_| Error::Truncated(format!("expected {} pattern bytes", m * row_bytes)))?;
        let mut matrix = Vec::with_capacity(m * n2);
        let mut sums = Vec::with_capacity(m);
        for i in 0..m {
            let row = &packed[i * row_bytes..(i + 1) * row_bytes];
            let mut s = 0u64;
            for j in 0..n2 {
                let bit = (row[j / 8] >> (j % 8)) & 1;
                s += bit as u64;
                matrix.push(bit as f64);
            }
            sums.push(s);
        }

        let h = hadamard_full(n)?;
        let selected_indices: Vec<u32> = row_order(&h, ordering)[..m].to_vec();
        let set = PatternSet { n, m, ordering, selected_indices, sums, matrix: Arc::new(matrix) };
        let computed = set.indices_digest();
        if computed != stored_digest {
            return Err(Error::ChecksumMismatch { stored: stored_digest, computed });
        }
        Ok(set)
    }

    pub fn load_path<P: AsRef<Path>>(path: P) -> Result<Self> {
        Self::load(BufReader::new(File::open(path)?))
    }
}
