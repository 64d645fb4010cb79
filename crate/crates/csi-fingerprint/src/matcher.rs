//! Fingerprint enrollment and KNN anomaly-detection authentication.
//!
//! A [`FingerprintLibrary`] holds the enrolled fingerprints of each known
//! identity. Authentication of a probe claiming identity `id` computes the
//! Euclidean distances from the probe to every fingerprint enrolled under
//! `id`, averages the `K` smallest, and accepts when that mean distance is
//! at or below the decision threshold. Rogue devices — whose hardware
//! distortion differs from the claimed identity's — land far from the
//! enrolled cluster and are rejected.
//!
//! Libraries are immutable snapshots: [`FingerprintLibrary::enroll`]
//! returns a new library sharing unchanged identities with the old one, so
//! concurrent authentications against a snapshot are safe by construction.

use crate::extract::Fingerprint;
use crate::signal::SignalConfig;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::sync::Arc;
use thiserror::Error;

/// Errors from enrollment or authentication.
#[derive(Debug, Error)]
pub enum MatchError {
    #[error("identity `{0}` is not enrolled")]
    UnknownIdentity(String),
    #[error("cannot enroll an empty fingerprint list for `{0}`")]
    EmptyEnrollment(String),
    #[error("identity name must be non-empty")]
    EmptyIdentityName,
    #[error("fingerprint has {got} tones, library wants {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("fingerprint contains non-finite values")]
    NonFinite,
    #[error("library was built under config digest {expected:016x}, got {found:016x}")]
    DigestMismatch { expected: u64, found: u64 },
    #[error("threshold {0} must be positive and finite")]
    BadThreshold(f64),
    #[error("k = {k} exceeds the {enrolled} enrolled fingerprints (or is zero)")]
    BadNeighborCount { k: usize, enrolled: usize },
}

/// How the neighbor count K is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KRule {
    /// Use `k_neighbors` as given.
    Explicit,
    /// K = ⌊√S⌋ per identity, clamped to [1, S]; tracks library size.
    SqrtS,
}

/// Which view of the complex fingerprint the distance is computed on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureView {
    /// Real and imaginary parts interleaved: a 2·|tones| real vector.
    Complex,
    /// Per-tone magnitudes only.
    Amplitude,
    /// Per-tone phases only (radians in (−π, π]).
    Phase,
}

impl std::fmt::Display for FeatureView {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FeatureView::Complex => write!(f, "complex"),
            FeatureView::Amplitude => write!(f, "amplitude"),
            FeatureView::Phase => write!(f, "phase"),
        }
    }
}

impl std::str::FromStr for FeatureView {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "complex" => Ok(FeatureView::Complex),
            "amplitude" => Ok(FeatureView::Amplitude),
            "phase" => Ok(FeatureView::Phase),
            other => Err(format!(
                "unknown feature view `{other}` (expected `complex`, `amplitude`, or `phase`)"
            )),
        }
    }
}

/// KNN decision parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatcherParams {
    /// Neighbor count when `k_rule` is [`KRule::Explicit`]; ignored under
    /// [`KRule::SqrtS`].
    pub k_neighbors: usize,
    /// Decision threshold on the mean neighbor distance; must be positive.
    pub threshold: f64,
    pub k_rule: KRule,
    /// Distance feature view; the complex view is the default and carries
    /// both amplitude and phase structure.
    pub feature: FeatureView,
}

impl MatcherParams {
    /// The standard configuration: K = ⌊√S⌋ on the complex view.
    pub fn sqrt_s(threshold: f64) -> Self {
        MatcherParams {
            k_neighbors: 1,
            threshold,
            k_rule: KRule::SqrtS,
            feature: FeatureView::Complex,
        }
    }

    fn validate_threshold(&self) -> Result<(), MatchError> {
        if !self.threshold.is_finite() || self.threshold <= 0.0 {
            return Err(MatchError::BadThreshold(self.threshold));
        }
        Ok(())
    }

    /// The neighbor count to use against `enrolled` fingerprints.
    pub fn effective_k(&self, enrolled: usize) -> Result<usize, MatchError> {
        match self.k_rule {
            KRule::Explicit => {
                if self.k_neighbors == 0 || self.k_neighbors > enrolled {
                    Err(MatchError::BadNeighborCount {
                        k: self.k_neighbors,
                        enrolled,
                    })
                } else {
                    Ok(self.k_neighbors)
                }
            }
            KRule::SqrtS => Ok(((enrolled as f64).sqrt().floor() as usize).clamp(1, enrolled)),
        }
    }
}

/// The outcome of one authentication attempt.
#[derive(Clone, Debug, PartialEq)]
pub struct AuthDecision {
    pub claimed_id: String,
    /// Mean distance to the K nearest enrolled fingerprints.
    pub distance: f64,
    pub threshold: f64,
    /// `distance ≤ threshold`; the boundary case accepts.
    pub accepted: bool,
    /// The K nearest distances, ascending.
    pub neighbor_distances: Vec<f64>,
}

/// Per-identity collections of enrolled fingerprints, pinned to one signal
/// config by digest and tone count.
#[derive(Clone, Debug)]
pub struct FingerprintLibrary {
    config_digest: u64,
    n_tones: usize,
    entries: BTreeMap<String, Arc<Vec<Fingerprint>>>,
}

impl FingerprintLibrary {
    pub fn new(config_digest: u64, n_tones: usize) -> Self {
        FingerprintLibrary {
            config_digest,
            n_tones,
            entries: BTreeMap::new(),
        }
    }

    pub fn for_config(config: &SignalConfig) -> Self {
        FingerprintLibrary::new(config.digest(), config.n_tones())
    }

    pub fn config_digest(&self) -> u64 {
        self.config_digest
    }

    pub fn n_tones(&self) -> usize {
        self.n_tones
    }

    /// Errors unless the library was built under `config`.
    pub fn check_config(&self, config: &SignalConfig) -> Result<(), MatchError> {
        if self.config_digest != config.digest() {
            return Err(MatchError::DigestMismatch {
                expected: self.config_digest,
                found: config.digest(),
            });
        }
        Ok(())
    }

    /// Returns a new library with `fingerprints` appended under `identity`.
    /// Existing identities are shared, not copied. With `dedup`,
    /// fingerprints already enrolled under the identity are skipped, making
    /// repeated enrollment of the same batch idempotent.
    pub fn enroll(
        &self,
        identity: &str,
        fingerprints: &[Fingerprint],
        dedup: bool,
    ) -> Result<FingerprintLibrary, MatchError> {
        if identity.is_empty() {
            return Err(MatchError::EmptyIdentityName);
        }
        if fingerprints.is_empty() {
            return Err(MatchError::EmptyEnrollment(identity.to_string()));
        }
        for fp in fingerprints {
            if fp.values.len() != self.n_tones {
                return Err(MatchError::LengthMismatch {
                    expected: self.n_tones,
                    got: fp.values.len(),
                });
            }
            if !fp.values.is_finite() {
                return Err(MatchError::NonFinite);
            }
        }
        let mut list: Vec<Fingerprint> = self
            .entries
            .get(identity)
            .map(|l| l.as_ref().clone())
            .unwrap_or_default();
        for fp in fingerprints {
            if dedup && list.contains(fp) {
                continue;
            }
            list.push(fp.clone());
        }
        let mut entries = self.entries.clone();
        entries.insert(identity.to_string(), Arc::new(list));
        Ok(FingerprintLibrary {
            config_digest: self.config_digest,
            n_tones: self.n_tones,
            entries,
        })
    }

    pub fn identities(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn fingerprints(&self, identity: &str) -> Option<&[Fingerprint]> {
        self.entries.get(identity).map(|l| l.as_slice())
    }

    /// Number of fingerprints enrolled under `identity` (0 when unknown).
    pub fn enrolled_count(&self, identity: &str) -> usize {
        self.entries.get(identity).map_or(0, |l| l.len())
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }
}

/// Squared Euclidean distance between two feature rows: the plain
/// sequential sum Σ (aₖ − bₖ)². This order is the matcher's canonical
/// pairwise arithmetic — batch scans vectorize across probes, never inside
/// this sum, so every code path produces bit-identical values.
fn squared_distance(row: &[f64], probe: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (a, b) in row.iter().zip(probe) {
        let d = a - b;
        acc += d * d;
    }
    acc
}

/// Extracts the distance features of one fingerprint under a view.
fn features_into(view: FeatureView, fp: &Fingerprint, out: &mut Vec<f64>) {
    match view {
        FeatureView::Complex => {
            for v in fp.values.iter() {
                out.push(v.re);
                out.push(v.im);
            }
        }
        FeatureView::Amplitude => out.extend(fp.values.iter().map(|v| v.norm())),
        FeatureView::Phase => out.extend(fp.values.iter().map(|v| v.arg())),
    }
}

/// Probes scored per library sweep in [`NeighborIndex::distances_batch`].
pub const PROBE_BLOCK: usize = 16;

/// One accumulation step of the batch sweep: adds `(r − ptⱼ)²` to every
/// probe lane. Per lane this is exactly [`squared_distance`]'s next term.
///
/// Threading the accumulator block through by value keeps it in vector
/// registers across the feature loop; accumulating into an array in place
/// leaves it on the stack when the surrounding loop's trip count is only
/// known at run time, and the store/reload chain costs ~3x.
#[inline(always)]
fn accumulate<const B: usize>(acc: [f64; B], r: f64, pt: &[f64; B]) -> [f64; B] {
    let mut out = [0.0f64; B];
    let mut j = 0;
    while j < B {
        let d = r - pt[j];
        out[j] = acc[j] + d * d;
        j += 1;
    }
    out
}

/// A prepared KNN view of one identity's enrolled fingerprints: features
/// flattened row-major for cache-friendly scans. Build once, probe many
/// times.
pub struct NeighborIndex {
    features: Vec<f64>,
    dim: usize,
    enrolled: usize,
    k: usize,
    view: FeatureView,
}

impl NeighborIndex {
    pub fn build(
        library: &FingerprintLibrary,
        params: &MatcherParams,
        claimed_id: &str,
    ) -> Result<Self, MatchError> {
        let fps = library
            .fingerprints(claimed_id)
            .ok_or_else(|| MatchError::UnknownIdentity(claimed_id.to_string()))?;
        let enrolled = fps.len();
        let k = params.effective_k(enrolled)?;
        let dim = match params.feature {
            FeatureView::Complex => 2 * library.n_tones(),
            FeatureView::Amplitude | FeatureView::Phase => library.n_tones(),
        };
        let mut features = Vec::with_capacity(enrolled * dim);
        for fp in fps {
            features_into(params.feature, fp, &mut features);
        }
        Ok(NeighborIndex {
            features,
            dim,
            enrolled,
            k,
            view: params.feature,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn enrolled(&self) -> usize {
        self.enrolled
    }

    /// Mean distance from the probe to the K nearest enrolled
    /// fingerprints, along with those distances in ascending order.
    pub fn distances(&self, probe: &Fingerprint) -> Result<(f64, Vec<f64>), MatchError> {
        self.validate_probe(probe)?;
        let mut probe_features = Vec::with_capacity(self.dim);
        features_into(self.view, probe, &mut probe_features);
        let squared: Vec<f64> = self
            .features
            .chunks_exact(self.dim)
            .map(|row| squared_distance(row, &probe_features))
            .collect();
        Ok(self.neighbors_from_squared(squared))
    }

    /// Keeps only the K smallest squared distances, then takes square
    /// roots and sums in ascending order — the one canonical selection
    /// order, shared by every caller, so results are reproducible to the
    /// last bit.
    fn neighbors_from_squared(&self, mut squared: Vec<f64>) -> (f64, Vec<f64>) {
        let mean = self.mean_from_squared(&mut squared);
        squared.truncate(self.k);
        let neighbors: Vec<f64> = squared.iter().map(|&d| d.sqrt()).collect();
        (mean, neighbors)
    }

    /// In-place twin of [`Self::neighbors_from_squared`] for the batch
    /// path: same selection, same ascending square-root sum, no neighbor
    /// list. Leaves the K smallest squared distances sorted at the front.
    fn mean_from_squared(&self, squared: &mut [f64]) -> f64 {
        let kept = if self.k < squared.len() {
            squared.select_nth_unstable_by(self.k - 1, |a, b| {
                a.partial_cmp(b).expect("distances are finite")
            });
            &mut squared[..self.k]
        } else {
            squared
        };
        kept.sort_unstable_by(|a, b| a.partial_cmp(b).expect("distances are finite"));
        kept.iter().map(|&d| d.sqrt()).sum::<f64>() / self.k as f64
    }

    /// Mean KNN distance only.
    pub fn distance(&self, probe: &Fingerprint) -> Result<f64, MatchError> {
        Ok(self.distances(probe)?.0)
    }

    /// Mean KNN distances for many probes in one pass.
    ///
    /// Probes are processed in blocks of [`PROBE_BLOCK`]: each sweep of the
    /// enrolled features scores a whole block, so the library is read once
    /// per block instead of once per probe — an order of magnitude less
    /// memory traffic on large evaluations. Each (row, probe) pair still
    /// accumulates with [`squared_distance`]'s sequential order, which
    /// makes every score bit-identical to a [`NeighborIndex::distance`]
    /// call for that probe alone.
    pub fn distances_batch<'a, I>(&self, probes: I) -> Result<Vec<f64>, MatchError>
    where
        I: IntoIterator<Item = &'a Fingerprint>,
    {
        const B: usize = PROBE_BLOCK;
        let probes: Vec<&Fingerprint> = probes.into_iter().collect();
        let mut scores = Vec::with_capacity(probes.len());
        let mut block_features = vec![0.0f64; self.dim * B];
        let mut transposed = vec![0.0f64; self.dim * B];
        let mut squared_block = vec![0.0f64; self.enrolled * B];
        let mut probe_major = vec![0.0f64; self.enrolled * B];
        let mut feature_buf = Vec::with_capacity(self.dim);
        let full_blocks = probes.len() / B * B;
        for block in probes[..full_blocks].chunks_exact(B) {
            for (j, probe) in block.iter().enumerate() {
                self.validate_probe(probe)?;
                feature_buf.clear();
                features_into(self.view, probe, &mut feature_buf);
                block_features[j * self.dim..(j + 1) * self.dim]
                    .copy_from_slice(&feature_buf);
            }
            for k in 0..self.dim {
                for j in 0..B {
                    transposed[k * B + j] = block_features[j * self.dim + k];
                }
            }
            for (row_idx, row) in self.features.chunks_exact(self.dim).enumerate() {
                let mut acc = [0.0f64; B];
                for (&r, pt) in row.iter().zip(transposed.chunks_exact(B)) {
                    let pt: &[f64; B] = pt.try_into().expect("chunk size is B");
                    acc = accumulate(acc, r, pt);
                }
                squared_block[row_idx * B..(row_idx + 1) * B].copy_from_slice(&acc);
            }
            // Transpose to probe-major in row tiles — each squared_block
            // cache line is read once, not once per probe — then select in
            // place on each contiguous column.
            const TILE: usize = 8;
            for tile_start in (0..self.enrolled).step_by(TILE) {
                let tile_end = (tile_start + TILE).min(self.enrolled);
                for j in 0..B {
                    for row_idx in tile_start..tile_end {
                        probe_major[j * self.enrolled + row_idx] =
                            squared_block[row_idx * B + j];
                    }
                }
            }
            for j in 0..B {
                let column =
                    &mut probe_major[j * self.enrolled..(j + 1) * self.enrolled];
                scores.push(self.mean_from_squared(column));
            }
        }
        for probe in &probes[full_blocks..] {
            scores.push(self.distance(probe)?);
        }
        Ok(scores)
    }

    fn validate_probe(&self, probe: &Fingerprint) -> Result<(), MatchError> {
        if probe.values.len() * self.dim_per_tone() != self.dim {
            return Err(MatchError::LengthMismatch {
                expected: self.dim / self.dim_per_tone(),
                got: probe.values.len(),
            });
        }
        if !probe.values.is_finite() {
            return Err(MatchError::NonFinite);
        }
        Ok(())
    }

    fn dim_per_tone(&self) -> usize {
        match self.view {
            FeatureView::Complex => 2,
            FeatureView::Amplitude | FeatureView::Phase => 1,
        }
    }
}

/// Mean Euclidean distance from the probe to the K nearest fingerprints
/// enrolled under `claimed_id`.
pub fn knn_distance(
    library: &FingerprintLibrary,
    params: &MatcherParams,
    claimed_id: &str,
    probe: &Fingerprint,
) -> Result<f64, MatchError> {
    NeighborIndex::build(library, params, claimed_id)?.distance(probe)
}

/// Full authentication: KNN distance plus the threshold decision.
/// A distance exactly at the threshold accepts.
pub fn authenticate(
    library: &FingerprintLibrary,
    params: &MatcherParams,
    claimed_id: &str,
    probe: &Fingerprint,
) -> Result<AuthDecision, MatchError> {
    params.validate_threshold()?;
    let index = NeighborIndex::build(library, params, claimed_id)?;
    let (distance, neighbor_distances) = index.distances(probe)?;
    Ok(AuthDecision {
        claimed_id: claimed_id.to_string(),
        distance,
        threshold: params.threshold,
        accepted: distance <= params.threshold,
        neighbor_distances,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds::derive_rng;
    use crate::signal::ToneVector;
    use num_complex::Complex64;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::Rng;

    fn fp(values: Vec<Complex64>) -> Fingerprint {
        Fingerprint {
            values: ToneVector::new(values),
            n_csi: 1,
            device_claim: None,
            extracted_at: 0,
        }
    }

    fn random_fp(rng: &mut impl Rng, n: usize) -> Fingerprint {
        fp((0..n)
            .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect())
    }

    fn library_with(n_tones: usize, identity: &str, fps: &[Fingerprint]) -> FingerprintLibrary {
        FingerprintLibrary::new(0xabcd, n_tones)
            .enroll(identity, fps, false)
            .unwrap()
    }

    /// The blocked batch path returns exactly what per-probe calls return,
    /// across block boundaries, tails, and feature views.
    #[test]
    fn batch_scores_equal_single_probe_scores_bitwise() {
        let mut rng = crate::seeds::derive_rng(77, &["batch"]);
        let enrolled: Vec<Fingerprint> = (0..120).map(|_| random_fp(&mut rng, 7)).collect();
        let lib = library_with(7, "dev1", &enrolled);
        // 37 probes: two full blocks of 16 plus a tail of 5.
        let probes: Vec<Fingerprint> = (0..37).map(|_| random_fp(&mut rng, 7)).collect();
        for view in [FeatureView::Complex, FeatureView::Amplitude, FeatureView::Phase] {
            let params = MatcherParams {
                k_neighbors: 9,
                threshold: 1.0,
                k_rule: KRule::Explicit,
                feature: view,
            };
            let index = NeighborIndex::build(&lib, &params, "dev1").unwrap();
            let batch = index.distances_batch(probes.iter()).unwrap();
            assert_eq!(batch.len(), probes.len());
            for (b, p) in batch.iter().zip(&probes) {
                let single = index.distance(p).unwrap();
                assert_eq!(b.to_bits(), single.to_bits());
            }
        }
    }

    #[test]
    fn batch_rejects_bad_probe_anywhere_in_block() {
        let mut rng = crate::seeds::derive_rng(78, &["batchbad"]);
        let enrolled: Vec<Fingerprint> = (0..20).map(|_| random_fp(&mut rng, 4)).collect();
        let lib = library_with(4, "dev1", &enrolled);
        let params = MatcherParams {
            k_neighbors: 3,
            threshold: 1.0,
            k_rule: KRule::Explicit,
            feature: FeatureView::Complex,
        };
        let index = NeighborIndex::build(&lib, &params, "dev1").unwrap();
        let mut probes: Vec<Fingerprint> = (0..20).map(|_| random_fp(&mut rng, 4)).collect();
        probes[11] = fp(vec![Complex64::new(f64::NAN, 0.0); 4]);
        assert!(matches!(
            index.distances_batch(probes.iter()),
            Err(MatchError::NonFinite)
        ));
        probes[11] = random_fp(&mut rng, 3);
        assert!(matches!(
            index.distances_batch(probes.iter()),
            Err(MatchError::LengthMismatch { .. })
        ));
    }

    /// Exhaustive reference: all distances, full sort, mean of first k.
    /// Must match the selection-based implementation bit for bit.
    fn oracle_knn(
        fps: &[Fingerprint],
        probe: &Fingerprint,
        k: usize,
        view: FeatureView,
    ) -> f64 {
        let feats = |f: &Fingerprint| {
            let mut v = Vec::new();
            features_into(view, f, &mut v);
            v
        };
        let p = feats(probe);
        let mut dists: Vec<f64> = fps
            .iter()
            .map(|e| {
                feats(e)
                    .iter()
                    .zip(&p)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        dists.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
        dists[..k].iter().sum::<f64>() / k as f64
    }

    #[test]
    fn self_distance_is_zero() {
        let a = fp(vec![Complex64::new(1.0, 2.0), Complex64::new(-0.5, 0.25)]);
        let lib = library_with(2, "dev1", &[a.clone()]);
        let params = MatcherParams {
            k_neighbors: 1,
            threshold: 1.0,
            k_rule: KRule::Explicit,
            feature: FeatureView::Complex,
        };
        assert_eq!(knn_distance(&lib, &params, "dev1", &a).unwrap(), 0.0);
    }

    #[test]
    fn two_point_library_averages_hand_value() {
        // Library {v, v + δ·e₁}, probe v, K=2 → (0 + δ)/2.
        let delta = 0.375; // exactly representable
        let v = fp(vec![Complex64::new(1.0, -1.0), Complex64::new(0.5, 0.5)]);
        let mut shifted = v.clone();
        shifted.values = ToneVector::new(vec![
            v.values[0] + Complex64::new(delta, 0.0),
            v.values[1],
        ]);
        let lib = library_with(2, "dev1", &[v.clone(), shifted]);
        let params = MatcherParams {
            k_neighbors: 2,
            threshold: 1.0,
            k_rule: KRule::Explicit,
            feature: FeatureView::Complex,
        };
        assert_eq!(
            knn_distance(&lib, &params, "dev1", &v).unwrap(),
            delta / 2.0
        );
    }

    #[test]
    fn knn_matches_exhaustive_oracle_exactly() {
        let mut rng = derive_rng(31, &["knn"]);
        for trial in 0..50 {
            let n_tones = rng.gen_range(2..12);
            let s = rng.gen_range(1..60);
            let fps: Vec<Fingerprint> = (0..s).map(|_| random_fp(&mut rng, n_tones)).collect();
            let probe = random_fp(&mut rng, n_tones);
            let k = rng.gen_range(1..=s);
            let lib = library_with(n_tones, "dev1", &fps);
            let params = MatcherParams {
                k_neighbors: k,
                threshold: 1.0,
                k_rule: KRule::Explicit,
                feature: FeatureView::Complex,
            };
            let got = knn_distance(&lib, &params, "dev1", &probe).unwrap();
            let want = oracle_knn(&fps, &probe, k, FeatureView::Complex);
            assert_eq!(got, want, "trial {trial}: selection differs from full sort");
        }
    }

    #[test]
    fn enrolled_order_never_matters() {
        let mut rng = derive_rng(32, &["perm"]);
        let fps: Vec<Fingerprint> = (0..40).map(|_| random_fp(&mut rng, 8)).collect();
        let probe = random_fp(&mut rng, 8);
        let params = MatcherParams {
            k_neighbors: 7,
            threshold: 1.0,
            k_rule: KRule::Explicit,
            feature: FeatureView::Complex,
        };
        let base = knn_distance(
            &library_with(8, "d", &fps),
            &params,
            "d",
            &probe,
        )
        .unwrap();
        for _ in 0..5 {
            let mut shuffled = fps.clone();
            shuffled.shuffle(&mut rng);
            let lib = library_with(8, "d", &shuffled);
            assert_eq!(knn_distance(&lib, &params, "d", &probe).unwrap(), base);
        }
    }

    #[test]
    fn mean_distance_is_monotone_in_k() {
        let mut rng = derive_rng(33, &["monok"]);
        let fps: Vec<Fingerprint> = (0..30).map(|_| random_fp(&mut rng, 6)).collect();
        let probe = random_fp(&mut rng, 6);
        let lib = library_with(6, "d", &fps);
        let mut last = 0.0;
        for k in 1..=30 {
            let params = MatcherParams {
                k_neighbors: k,
                threshold: 1.0,
                k_rule: KRule::Explicit,
                feature: FeatureView::Complex,
            };
            let d = knn_distance(&lib, &params, "d", &probe).unwrap();
            assert!(d >= last - 1e-12, "k {k}: {d} < {last}");
            last = d;
        }
    }

    #[test]
    fn sqrt_s_rule_tracks_library_size() {
        let mut rng = derive_rng(34, &["sqrts"]);
        for (s, want_k) in [(1, 1), (2, 1), (4, 2), (50, 7), (600, 24), (6000, 77)] {
            let params = MatcherParams::sqrt_s(1.0);
            assert_eq!(params.effective_k(s).unwrap(), want_k, "S = {s}");
        }
        // Explicit K beyond S errors instead of silently clamping.
        let fps: Vec<Fingerprint> = (0..3).map(|_| random_fp(&mut rng, 4)).collect();
        let lib = library_with(4, "d", &fps);
        let params = MatcherParams {
            k_neighbors: 4,
            threshold: 1.0,
            k_rule: KRule::Explicit,
            feature: FeatureView::Complex,
        };
        assert!(matches!(
            knn_distance(&lib, &params, "d", &random_fp(&mut rng, 4)),
            Err(MatchError::BadNeighborCount { k: 4, enrolled: 3 })
        ));
    }

    #[test]
    fn boundary_distance_accepts() {
        let a = fp(vec![Complex64::new(0.0, 0.0)]);
        let b = fp(vec![Complex64::new(0.75, 0.0)]);
        let lib = library_with(1, "d", &[a]);
        let params = MatcherParams {
            k_neighbors: 1,
            threshold: 0.75,
            k_rule: KRule::Explicit,
            feature: FeatureView::Complex,
        };
        let decision = authenticate(&lib, &params, "d", &b).unwrap();
        assert_eq!(decision.distance, 0.75);
        assert!(decision.accepted, "distance exactly at threshold accepts");
        let tighter = MatcherParams {
            threshold: 0.75 - 1e-12,
            ..params
        };
        assert!(!authenticate(&lib, &tighter, "d", &b).unwrap().accepted);
    }

    #[test]
    fn decision_mean_equals_neighbor_mean() {
        let mut rng = derive_rng(35, &["dec"]);
        let fps: Vec<Fingerprint> = (0..20).map(|_| random_fp(&mut rng, 5)).collect();
        let lib = library_with(5, "d", &fps);
        let params = MatcherParams {
            k_neighbors: 6,
            threshold: 2.0,
            k_rule: KRule::Explicit,
            feature: FeatureView::Complex,
        };
        let d = authenticate(&lib, &params, "d", &random_fp(&mut rng, 5)).unwrap();
        assert_eq!(d.neighbor_distances.len(), 6);
        assert!(d.neighbor_distances.windows(2).all(|w| w[0] <= w[1]));
        let mean = d.neighbor_distances.iter().sum::<f64>() / 6.0;
        assert_eq!(d.distance, mean);
    }

    #[test]
    fn enroll_snapshots_are_independent() {
        let mut rng = derive_rng(36, &["snap"]);
        let base = FingerprintLibrary::new(1, 4);
        let first = base.enroll("dev1", &[random_fp(&mut rng, 4)], false).unwrap();
        let second = first.enroll("dev2", &[random_fp(&mut rng, 4)], false).unwrap();
        let third = second.enroll("dev1", &[random_fp(&mut rng, 4)], false).unwrap();
        assert_eq!(base.enrolled_count("dev1"), 0);
        assert_eq!(first.enrolled_count("dev1"), 1);
        assert_eq!(second.enrolled_count("dev1"), 1);
        assert_eq!(third.enrolled_count("dev1"), 2);
        assert_eq!(third.enrolled_count("dev2"), 1);
        // Unchanged identities are shared between snapshots, not copied.
        assert!(Arc::ptr_eq(
            &second.entries["dev2"],
            &third.entries["dev2"]
        ));
    }

    #[test]
    fn dedup_makes_enrollment_idempotent() {
        let mut rng = derive_rng(37, &["dedup"]);
        let batch: Vec<Fingerprint> = (0..5).map(|_| random_fp(&mut rng, 4)).collect();
        let lib = FingerprintLibrary::new(1, 4)
            .enroll("d", &batch, true)
            .unwrap();
        let again = lib.enroll("d", &batch, true).unwrap();
        assert_eq!(again.enrolled_count("d"), 5);
        // Without dedup the same batch doubles.
        let doubled = lib.enroll("d", &batch, false).unwrap();
        assert_eq!(doubled.enrolled_count("d"), 10);
    }

    #[test]
    fn enroll_validates_input() {
        let lib = FingerprintLibrary::new(1, 4);
        assert!(matches!(
            lib.enroll("d", &[], false),
            Err(MatchError::EmptyEnrollment(_))
        ));
        assert!(matches!(
            lib.enroll("", &[fp(vec![Complex64::new(0.0, 0.0); 4])], false),
            Err(MatchError::EmptyIdentityName)
        ));
        assert!(matches!(
            lib.enroll("d", &[fp(vec![Complex64::new(0.0, 0.0); 3])], false),
            Err(MatchError::LengthMismatch { expected: 4, got: 3 })
        ));
        assert!(matches!(
            lib.enroll("d", &[fp(vec![Complex64::new(f64::NAN, 0.0); 4])], false),
            Err(MatchError::NonFinite)
        ));
        assert!(matches!(
            knn_distance(
                &lib,
                &MatcherParams::sqrt_s(1.0),
                "ghost",
                &fp(vec![Complex64::new(0.0, 0.0); 4])
            ),
            Err(MatchError::UnknownIdentity(_))
        ));
    }

    #[test]
    fn config_check_compares_digests() {
        let config = SignalConfig::ht20();
        let lib = FingerprintLibrary::for_config(&config);
        assert!(lib.check_config(&config).is_ok());
        let other = SignalConfig::build(64, "ht20", 7).unwrap();
        assert!(matches!(
            lib.check_config(&other),
            Err(MatchError::DigestMismatch { .. })
        ));
    }

    /// Amplitude view ignores pure phase rotations; phase view ignores
    /// pure magnitude scaling.
    #[test]
    fn feature_views_isolate_their_component() {
        let mut rng = derive_rng(38, &["views"]);
        let base = random_fp(&mut rng, 6);
        let rotated = Fingerprint {
            values: base.values.scale(Complex64::from_polar(1.0, 0.7)),
            ..base.clone()
        };
        let lib = library_with(6, "d", &[base.clone()]);
        let k1 = |feature| MatcherParams {
            k_neighbors: 1,
            threshold: 1.0,
            k_rule: KRule::Explicit,
            feature,
        };
        let amp = knn_distance(&lib, &k1(FeatureView::Amplitude), "d", &rotated).unwrap();
        let cpx = knn_distance(&lib, &k1(FeatureView::Complex), "d", &rotated).unwrap();
        assert!(amp < 1e-12, "amplitude view sees rotation: {amp}");
        assert!(cpx > 0.1, "complex view must see rotation");
        let scaled = Fingerprint {
            values: base.values.scale(Complex64::new(1.5, 0.0)),
            ..base.clone()
        };
        let ph = knn_distance(&lib, &k1(FeatureView::Phase), "d", &scaled).unwrap();
        assert!(ph < 1e-12, "phase view sees scaling: {ph}");
    }

    #[test]
    fn authenticate_validates_threshold() {
        let lib = library_with(1, "d", &[fp(vec![Complex64::new(0.0, 0.0)])]);
        for bad in [0.0, -1.0, f64::NAN, f64::INFINITY] {
            let params = MatcherParams {
                k_neighbors: 1,
                threshold: bad,
                k_rule: KRule::Explicit,
                feature: FeatureView::Complex,
            };
            assert!(matches!(
                authenticate(&lib, &params, "d", &fp(vec![Complex64::new(0.0, 0.0)])),
                Err(MatchError::BadThreshold(_))
            ));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        /// Acceptance is monotone in the threshold over any probe set.
        #[test]
        fn acceptance_count_monotone_in_threshold(
            seed in 0u64..1000,
            thresholds in proptest::collection::vec(1e-3f64..3.0, 2..6),
        ) {
            let mut rng = derive_rng(seed, &["prop-thresh"]);
            let fps: Vec<Fingerprint> = (0..12).map(|_| random_fp(&mut rng, 4)).collect();
            let probes: Vec<Fingerprint> = (0..15).map(|_| random_fp(&mut rng, 4)).collect();
            let lib = library_with(4, "d", &fps);
            let mut sorted = thresholds.clone();
            sorted.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
            let count_at = |t: f64| {
                let params = MatcherParams {
                    k_neighbors: 3,
                    threshold: t,
                    k_rule: KRule::Explicit,
                    feature: FeatureView::Complex,
                };
                probes
                    .iter()
                    .filter(|p| authenticate(&lib, &params, "d", p).unwrap().accepted)
                    .count()
            };
            let counts: Vec<usize> = sorted.iter().map(|&t| count_at(t)).collect();
            prop_assert!(counts.windows(2).all(|w| w[0] <= w[1]));
        }

        /// Selection-based KNN equals the exhaustive oracle on arbitrary
        /// shapes, including ties from duplicated fingerprints.
        #[test]
        fn knn_equals_oracle_with_duplicates(
            seed in 0u64..1000,
            s in 1usize..25,
            dup in 0usize..3,
        ) {
            let mut rng = derive_rng(seed, &["prop-knn"]);
            let mut fps: Vec<Fingerprint> = (0..s).map(|_| random_fp(&mut rng, 5)).collect();
            for i in 0..dup.min(s) {
                fps.push(fps[i].clone());
            }
            let probe = random_fp(&mut rng, 5);
            let k = rng.gen_range(1..=fps.len());
            let lib = library_with(5, "d", &fps);
            let params = MatcherParams {
                k_neighbors: k,
                threshold: 1.0,
                k_rule: KRule::Explicit,
                feature: FeatureView::Complex,
            };
            let got = knn_distance(&lib, &params, "d", &probe).unwrap();
            let want = oracle_knn(&fps, &probe, k, FeatureView::Complex);
            prop_assert_eq!(got, want);
        }
    }
}
