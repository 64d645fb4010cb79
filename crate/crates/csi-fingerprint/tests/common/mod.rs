//! Oracles and reporting shared by the integration suites.
//!
//! Each oracle re-derives a quantity by the most direct method available —
//! dense linear algebra, exhaustive sorting, naive counted sweeps — so the
//! library's structured implementations have something independent to
//! match against.

use std::io::Write as _;
use std::time::Duration;

use nalgebra::DMatrix;
use num_complex::Complex64;

use csi_fingerprint::extract::Fingerprint;
use csi_fingerprint::matcher::{FeatureView, KRule, MatcherParams};
use csi_fingerprint::signal::{SignalConfig, ToneVector};

/// Prints one verdict line for a checked property and panics on failure.
///
/// The line goes straight to the stderr file descriptor so it stays
/// visible even under the test harness's output capture.
pub fn report(name: &str, ok: bool, detail: &str, elapsed: Duration, budget: Duration) {
    let within = elapsed <= budget;
    let verdict = if ok && within { "PASS" } else { "FAIL" };
    let line = format!(
        "{verdict} {name} — {detail} ({:.1}s of {:.0}s budget)\n",
        elapsed.as_secs_f64(),
        budget.as_secs_f64()
    );
    let _ = std::io::stderr().lock().write_all(line.as_bytes());
    assert!(ok, "{name}: {detail}");
    assert!(
        within,
        "{name}: runtime {:.1}s exceeded the {:.0}s budget",
        elapsed.as_secs_f64(),
        budget.as_secs_f64()
    );
}

/// Dense orthogonal projector onto the tap-response span, computed the
/// expensive way: P = F · F⁺ with the pseudo-inverse from a full SVD.
pub fn dense_projector(config: &SignalConfig) -> DMatrix<Complex64> {
    let m = config.partial_dft().matrix();
    let (rows, cols) = m.dim();
    let f = DMatrix::from_fn(rows, cols, |i, j| m[[i, j]]);
    let pinv = f
        .clone()
        .svd(true, true)
        .pseudo_inverse(1e-12)
        .expect("partial DFT matrix has full column rank");
    &f * pinv
}

/// Applies a dense projector to a tone vector.
pub fn apply_projector(p: &DMatrix<Complex64>, v: &ToneVector) -> ToneVector {
    let x = nalgebra::DVector::from_iterator(v.len(), v.iter().copied());
    let y = p * x;
    ToneVector::new(y.iter().copied().collect())
}

/// Largest per-tone deviation between two tone vectors.
pub fn max_abs_diff(a: &ToneVector, b: &ToneVector) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).norm())
        .fold(0.0, f64::max)
}

fn features(view: FeatureView, fp: &Fingerprint) -> Vec<f64> {
    match view {
        FeatureView::Complex => fp
            .values
            .iter()
            .flat_map(|v| [v.re, v.im])
            .collect(),
        FeatureView::Amplitude => fp.values.iter().map(|v| v.norm()).collect(),
        FeatureView::Phase => fp.values.iter().map(|v| v.arg()).collect(),
    }
}

/// Mean distance to the K nearest enrolled fingerprints by exhaustive
/// sort: every distance computed, fully sorted, first K averaged in
/// ascending order.
pub fn oracle_knn(enrolled: &[Fingerprint], params: &MatcherParams, probe: &Fingerprint) -> f64 {
    let s = enrolled.len();
    let k = match params.k_rule {
        KRule::Explicit => params.k_neighbors,
        KRule::SqrtS => ((s as f64).sqrt().floor() as usize).clamp(1, s),
    };
    let probe_features = features(params.feature, probe);
    let mut distances: Vec<f64> = enrolled
        .iter()
        .map(|e| {
            let ef = features(params.feature, e);
            let mut sq = 0.0;
            for (a, b) in ef.iter().zip(&probe_features) {
                let d = a - b;
                sq += d * d;
            }
            sq.sqrt()
        })
        .collect();
    distances.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    distances.truncate(k);
    distances.iter().sum::<f64>() / k as f64
}

/// Candidate thresholds for an exhaustive sweep: −∞, every distinct
/// score, the midpoint between each adjacent pair of distinct scores, +∞.
pub fn sweep_candidates(scores: impl IntoIterator<Item = f64>) -> Vec<f64> {
    let mut all: Vec<f64> = scores.into_iter().collect();
    all.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    all.dedup();
    let mut candidates = vec![f64::NEG_INFINITY];
    for i in 0..all.len() {
        candidates.push(all[i]);
        if i + 1 < all.len() {
            candidates.push(all[i] + (all[i + 1] - all[i]) / 2.0);
        }
    }
    candidates.push(f64::INFINITY);
    candidates
}

/// Fraction of scores strictly above the threshold, by naive counting.
pub fn frac_gt(scores: &[f64], t: f64) -> f64 {
    scores.iter().filter(|&&s| s > t).count() as f64 / scores.len() as f64
}

/// The operating point at a false-alarm cap, by linear scan over every
/// candidate threshold in ascending order: the first (smallest) feasible
/// candidate maximizes the detection rate. Returns (threshold, far, adr).
pub fn oracle_operating_point(legit: &[f64], attack: &[f64], cap: f64) -> (f64, f64, f64) {
    for t in sweep_candidates(legit.iter().chain(attack).copied()) {
        let far = frac_gt(legit, t);
        if far <= cap {
            return (t, far, frac_gt(attack, t));
        }
    }
    unreachable!("+inf always meets the cap");
}

/// Every distinct (FAR, ADR) pair the sweep can reach, sorted by FAR then
/// ADR.
pub fn oracle_roc(legit: &[f64], attack: &[f64]) -> Vec<(f64, f64)> {
    let mut points: Vec<(f64, f64)> = sweep_candidates(legit.iter().chain(attack).copied())
        .into_iter()
        .map(|t| (frac_gt(legit, t), frac_gt(attack, t)))
        .collect();
    points.sort_by(|a, b| a.partial_cmp(b).expect("finite rates"));
    points.dedup();
    points
}
