//! OFDM signal-space machinery: subcarrier maps, tone vectors, partial DFT
//! matrices, and the tap-subspace projector.
//!
//! Everything downstream agrees on one [`SignalConfig`]: which DFT bins carry
//! data (the tone set), which time-domain taps the channel is allowed to
//! occupy (the leak window), and the long-training-symbol values transmitted
//! on each tone. The config owns a precomputed [`PartialDft`] whose column
//! span is the set of frequency responses reachable from the leak window;
//! orthogonal projection onto that span is what separates channel from
//! device distortion.

use ndarray::{Array1, Array2, ArrayView1};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::f64::consts::PI;
use std::fmt;
use std::ops::Index;
use thiserror::Error;

/// Errors from building signal configurations or partial DFT operators.
#[derive(Debug, Error)]
pub enum SignalError {
    #[error("DFT length {0} is not a power of two")]
    DftLenNotPowerOfTwo(usize),
    #[error("unknown subcarrier map `{0}`")]
    UnknownMap(String),
    #[error(
        "leak half-width {halfwidth} spans {taps} taps but only {tones} tones are observed; \
         the tap coefficients would be underdetermined"
    )]
    LeakWindowTooLarge {
        halfwidth: usize,
        taps: usize,
        tones: usize,
    },
    #[error("partial DFT gram matrix is numerically singular")]
    SingularGram,
    #[error("training sequence must provide {expected} entries, got {got}")]
    TrainingLengthMismatch { expected: usize, got: usize },
}

/// A complex vector indexed by the tones of a subcarrier map, in map order.
///
/// This is the common currency of the pipeline: CSI measurements, channel
/// frequency responses, distortion profiles, and fingerprints are all tone
/// vectors of the same length.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToneVector(Vec<Complex64>);

impl ToneVector {
    pub fn new(values: Vec<Complex64>) -> Self {
        ToneVector(values)
    }

    pub fn zeros(len: usize) -> Self {
        ToneVector(vec![Complex64::new(0.0, 0.0); len])
    }

    pub fn ones(len: usize) -> Self {
        ToneVector(vec![Complex64::new(1.0, 0.0); len])
    }

    pub fn from_fn(len: usize, mut f: impl FnMut(usize) -> Complex64) -> Self {
        ToneVector((0..len).map(&mut f).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[Complex64] {
        &self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Complex64> {
        self.0.iter()
    }

    pub fn into_vec(self) -> Vec<Complex64> {
        self.0
    }

    pub fn map(&self, f: impl FnMut(Complex64) -> Complex64) -> Self {
        ToneVector(self.0.iter().copied().map(f).collect())
    }

    /// Element-wise combination with another vector of the same length.
    pub fn zip_map(&self, other: &Self, mut f: impl FnMut(Complex64, Complex64) -> Complex64) -> Self {
        assert_eq!(self.len(), other.len(), "tone vector length mismatch");
        ToneVector(
            self.0
                .iter()
                .zip(&other.0)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        )
    }

    pub fn add(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a - b)
    }

    /// Element-wise (Hadamard) product.
    pub fn mul_elem(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a * b)
    }

    /// Element-wise division; the caller is responsible for guarding small
    /// denominators.
    pub fn div_elem(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a / b)
    }

    pub fn scale(&self, s: Complex64) -> Self {
        self.map(|v| v * s)
    }

    /// Euclidean norm over the complex entries.
    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
    }

    /// Root-mean-square magnitude.
    pub fn rms(&self) -> f64 {
        if self.0.is_empty() {
            return 0.0;
        }
        (self.0.iter().map(|v| v.norm_sqr()).sum::<f64>() / self.0.len() as f64).sqrt()
    }

    /// Largest entry magnitude (the natural “worst tone” metric for
    /// extraction accuracy).
    pub fn max_abs(&self) -> f64 {
        self.0.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    /// Euclidean distance to another vector of the same length.
    pub fn distance_to(&self, other: &Self) -> f64 {
        assert_eq!(self.len(), other.len(), "tone vector length mismatch");
        self.0
            .iter()
            .zip(&other.0)
            .map(|(&a, &b)| (a - b).norm_sqr())
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.re.is_finite() && v.im.is_finite())
    }

    fn as_array(&self) -> ArrayView1<'_, Complex64> {
        ArrayView1::from(&self.0)
    }
}

impl Index<usize> for ToneVector {
    type Output = Complex64;

    fn index(&self, idx: usize) -> &Complex64 {
        &self.0[idx]
    }
}

impl<'a> IntoIterator for &'a ToneVector {
    type Item = &'a Complex64;
    type IntoIter = std::slice::Iter<'a, Complex64>;

    fn into_iter(self) -> Self::IntoIter {
        self.0.iter()
    }
}

impl FromIterator<Complex64> for ToneVector {
    fn from_iter<T: IntoIterator<Item = Complex64>>(iter: T) -> Self {
        ToneVector(iter.into_iter().collect())
    }
}

/// The 56 training-symbol values of the 20 MHz HT long training field, in
/// tone order (negative frequencies first, DC omitted). The middle 52 values
/// are the legacy long-training sequence; the four edge tones extend it.
const HT20_TRAINING: [i8; 56] = [
    1, 1, 1, 1, -1, -1, 1, 1, -1, 1, -1, 1, 1, 1, 1, 1, 1, -1, -1, 1, 1, -1, 1, -1, 1, 1, 1, 1,
    1, -1, -1, 1, 1, -1, 1, -1, 1, -1, -1, -1, -1, -1, 1, 1, -1, -1, 1, -1, 1, -1, 1, 1, 1, 1,
    -1, -1,
];

/// Signed subcarrier offsets of the 20 MHz HT map: tones −28..−1 and 1..28,
/// DC and guard bands excluded.
fn ht20_offsets() -> Vec<i32> {
    (-28..=-1).chain(1..=28).collect()
}

/// A frozen description of the OFDM signal space.
///
/// Constructed once via [`SignalConfig::build`] (or the [`SignalConfig::ht20`]
/// shorthand) and shared by simulation, extraction, matching, and I/O. Two
/// configs agree exactly when their [digests](SignalConfig::digest) agree;
/// trace files and fingerprint libraries embed the digest so that data cannot
/// silently cross configurations.
#[derive(Clone, Debug)]
pub struct SignalConfig {
    dft_len: usize,
    map_name: String,
    /// DFT bin index per tone, in map order.
    subcarriers: Vec<usize>,
    /// Signed subcarrier offset per tone, in map order.
    offsets: Vec<i32>,
    /// Training-symbol value per tone.
    training: Vec<Complex64>,
    leak_halfwidth: usize,
    /// Time-domain tap indices the channel may occupy, window order
    /// (−halfwidth..=halfwidth reduced mod `dft_len`).
    tap_set: Vec<usize>,
    dft: PartialDft,
}

impl SignalConfig {
    /// Builds a config for a named subcarrier map.
    ///
    /// `dft_len` must be a power of two, and the leak window `2 *
    /// leak_halfwidth + 1` must stay strictly below the tone count so the
    /// least-squares tap fit is overdetermined.
    pub fn build(dft_len: usize, map_name: &str, leak_halfwidth: usize) -> Result<Self, SignalError> {
        if !dft_len.is_power_of_two() {
            return Err(SignalError::DftLenNotPowerOfTwo(dft_len));
        }
        let offsets = match map_name {
            "ht20" => ht20_offsets(),
            other => return Err(SignalError::UnknownMap(other.to_string())),
        };
        let max_offset = offsets.iter().map(|o| o.unsigned_abs() as usize).max().unwrap_or(0);
        if max_offset >= dft_len / 2 {
            // A map whose tones do not fit in the DFT is a caller error in
            // the same class as an unknown map name.
            return Err(SignalError::UnknownMap(format!(
                "{map_name} (needs DFT length > {})",
                2 * max_offset
            )));
        }
        let training: Vec<Complex64> = HT20_TRAINING
            .iter()
            .map(|&v| Complex64::new(v as f64, 0.0))
            .collect();
        if training.len() != offsets.len() {
            return Err(SignalError::TrainingLengthMismatch {
                expected: offsets.len(),
                got: training.len(),
            });
        }
        let n_taps = 2 * leak_halfwidth + 1;
        if n_taps >= offsets.len() {
            return Err(SignalError::LeakWindowTooLarge {
                halfwidth: leak_halfwidth,
                taps: n_taps,
                tones: offsets.len(),
            });
        }
        let subcarriers: Vec<usize> = offsets
            .iter()
            .map(|&o| (o.rem_euclid(dft_len as i32)) as usize)
            .collect();
        let half = leak_halfwidth as i32;
        let tap_set: Vec<usize> = (-half..=half)
            .map(|t| (t.rem_euclid(dft_len as i32)) as usize)
            .collect();
        let dft = PartialDft::new(dft_len, &subcarriers, &tap_set)?;
        Ok(SignalConfig {
            dft_len,
            map_name: map_name.to_string(),
            subcarriers,
            offsets,
            training,
            leak_halfwidth,
            tap_set,
            dft,
        })
    }

    /// The default configuration: 64-point DFT, 20 MHz HT map (56 tones),
    /// leak half-width 8 (17 taps).
    pub fn ht20() -> Self {
        SignalConfig::build(64, "ht20", 8).expect("builtin ht20 map is valid")
    }

    pub fn dft_len(&self) -> usize {
        self.dft_len
    }

    pub fn map_name(&self) -> &str {
        &self.map_name
    }

    /// Number of observed tones.
    pub fn n_tones(&self) -> usize {
        self.subcarriers.len()
    }

    /// DFT bin index per tone, in map order.
    pub fn subcarriers(&self) -> &[usize] {
        &self.subcarriers
    }

    /// Signed subcarrier offset per tone, in map order.
    pub fn offsets(&self) -> &[i32] {
        &self.offsets
    }

    /// Training-symbol value per tone.
    pub fn training(&self) -> &[Complex64] {
        &self.training
    }

    pub fn leak_halfwidth(&self) -> usize {
        self.leak_halfwidth
    }

    /// Time-domain tap indices the channel may occupy, in window order.
    pub fn tap_set(&self) -> &[usize] {
        &self.tap_set
    }

    pub fn partial_dft(&self) -> &PartialDft {
        &self.dft
    }

    /// Orthogonal projection of a tone vector onto the span of tap responses.
    pub fn project_onto_taps(&self, v: &ToneVector) -> ToneVector {
        self.dft.project(v)
    }

    /// Least-squares tap coefficients for a tone vector, in window order.
    pub fn tap_fit(&self, v: &ToneVector) -> Vec<Complex64> {
        self.dft.tap_fit(v)
    }

    /// A short digest of everything that defines the signal space: DFT
    /// length, tone set, training values, and leak window. Embedded in trace
    /// files and libraries to reject cross-config data.
    pub fn digest(&self) -> u64 {
        let mut h = Sha256::new();
        h.update((self.dft_len as u64).to_le_bytes());
        h.update((self.leak_halfwidth as u64).to_le_bytes());
        h.update((self.subcarriers.len() as u64).to_le_bytes());
        for &s in &self.subcarriers {
            h.update((s as u64).to_le_bytes());
        }
        for t in &self.training {
            h.update(t.re.to_le_bytes());
            h.update(t.im.to_le_bytes());
        }
        for &t in &self.tap_set {
            h.update((t as u64).to_le_bytes());
        }
        let bytes = h.finalize();
        u64::from_le_bytes(bytes[..8].try_into().expect("digest is long enough"))
    }

    /// Digest formatted the way file headers print it.
    pub fn digest_hex(&self) -> String {
        format!("{:016x}", self.digest())
    }
}

impl fmt::Display for SignalConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} ({} tones / {}-point DFT, leak window ±{})",
            self.map_name,
            self.n_tones(),
            self.dft_len,
            self.leak_halfwidth
        )
    }
}

/// The partial DFT operator tying the observed tones to the leak-window taps,
/// with its precomputed normal-equation inverse.
///
/// The matrix `F` has one row per tone `k` and one column per tap `l`, with
/// entries `exp(-i 2π k l / N) / sqrt(N)`. Because the tap window is narrower
/// than the tone set, `F` has full column rank and `F (FᴴF)⁻¹ Fᴴ` is the
/// orthogonal projector onto its column span.
#[derive(Clone, Debug)]
pub struct PartialDft {
    /// Tones × taps.
    matrix: Array2<Complex64>,
    /// Taps × tones, the conjugate transpose of `matrix`.
    adjoint: Array2<Complex64>,
    /// (FᴴF)⁻¹, taps × taps.
    gram_inverse: Array2<Complex64>,
}

impl PartialDft {
    /// Builds the operator for the given tone bins and tap indices.
    ///
    /// Phases are computed from `(k * l) mod N` so that large index products
    /// cannot lose precision in the angle reduction.
    pub fn new(dft_len: usize, subcarriers: &[usize], tap_set: &[usize]) -> Result<Self, SignalError> {
        let n = dft_len as f64;
        let scale = 1.0 / n.sqrt();
        let mut matrix = Array2::zeros((subcarriers.len(), tap_set.len()));
        for (r, &k) in subcarriers.iter().enumerate() {
            for (c, &l) in tap_set.iter().enumerate() {
                let phase = -2.0 * PI * ((k * l) % dft_len) as f64 / n;
                matrix[(r, c)] = Complex64::from_polar(scale, phase);
            }
        }
        let adjoint = matrix.t().mapv(|z| z.conj());
        let gram = adjoint.dot(&matrix);
        let gram_inverse = invert(&gram).ok_or(SignalError::SingularGram)?;
        // Guard against a numerically useless inverse: the residual of
        // G⁻¹G against the identity must be tiny for the projector to mean
        // anything.
        let ident = gram_inverse.dot(&gram);
        for r in 0..ident.nrows() {
            for c in 0..ident.ncols() {
                let expect = if r == c { 1.0 } else { 0.0 };
                if (ident[(r, c)] - Complex64::new(expect, 0.0)).norm() > 1e-10 {
                    return Err(SignalError::SingularGram);
                }
            }
        }
        Ok(PartialDft {
            matrix,
            adjoint,
            gram_inverse,
        })
    }

    pub fn n_tones(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn n_taps(&self) -> usize {
        self.matrix.ncols()
    }

    /// Tones × taps matrix `F`.
    pub fn matrix(&self) -> &Array2<Complex64> {
        &self.matrix
    }

    /// Least-squares tap coefficients `(FᴴF)⁻¹ Fᴴ v`.
    pub fn tap_fit(&self, v: &ToneVector) -> Vec<Complex64> {
        assert_eq!(v.len(), self.n_tones(), "tone vector length mismatch");
        let correlated = self.adjoint.dot(&v.as_array());
        self.gram_inverse.dot(&correlated).to_vec()
    }

    /// Orthogonal projection `F (FᴴF)⁻¹ Fᴴ v` onto the tap-response span.
    pub fn project(&self, v: &ToneVector) -> ToneVector {
        assert_eq!(v.len(), self.n_tones(), "tone vector length mismatch");
        let correlated = self.adjoint.dot(&v.as_array());
        let taps: Array1<Complex64> = self.gram_inverse.dot(&correlated);
        ToneVector(self.matrix.dot(&taps).to_vec())
    }

    /// Frequency response on the observed tones of the given tap
    /// coefficients (in window order): `F t`.
    pub fn taps_to_tones(&self, taps: &[Complex64]) -> ToneVector {
        assert_eq!(taps.len(), self.n_taps(), "tap count mismatch");
        let t = ArrayView1::from(taps);
        ToneVector(self.matrix.dot(&t).to_vec())
    }
}

/// Gauss–Jordan inversion with partial pivoting; `None` when a pivot
/// underflows. The gram matrices this sees are small (tens of taps), well
/// conditioned, and Hermitian, so no fancier factorization is warranted.
fn invert(m: &Array2<Complex64>) -> Option<Array2<Complex64>> {
    let n = m.nrows();
    assert_eq!(n, m.ncols(), "only square matrices can be inverted");
    let mut a = m.clone();
    let mut inv = Array2::eye(n);
    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&i, &j| {
                a[(i, col)]
                    .norm_sqr()
                    .partial_cmp(&a[(j, col)].norm_sqr())
                    .expect("pivot magnitudes are finite")
            })
            .expect("column range is nonempty");
        let pivot = a[(pivot_row, col)];
        if pivot.norm() < 1e-12 {
            return None;
        }
        if pivot_row != col {
            for c in 0..n {
                a.swap((pivot_row, c), (col, c));
                inv.swap((pivot_row, c), (col, c));
            }
        }
        let inv_pivot = pivot.inv();
        for c in 0..n {
            a[(col, c)] *= inv_pivot;
            inv[(col, c)] *= inv_pivot;
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let factor = a[(r, col)];
            if factor == Complex64::new(0.0, 0.0) {
                continue;
            }
            for c in 0..n {
                let sub_a = a[(col, c)] * factor;
                a[(r, c)] -= sub_a;
                let sub_i = inv[(col, c)] * factor;
                inv[(r, c)] -= sub_i;
            }
        }
    }
    Some(inv)
}
