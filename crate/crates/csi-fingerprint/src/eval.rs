//! Evaluation protocol: device rotation, operating points, ROC data, and
//! fingerprint-stability reports.
//!
//! The central experiment rotates every device through the legitimate
//! role: its enrolled fingerprints form the library, its held-out probe
//! fingerprints provide the false-alarm class, and every other device
//! attacks with an equal number of probes. Scores are KNN mean distances;
//! lower means "closer to the claimed identity".
//!
//! Two threshold styles are supported. The *oracle* style picks the
//! threshold directly from the test scores (the most favorable reading of
//! per-table results); the *calibrated* style picks it from leave-one-out
//! scores of the library alone and then measures on the test scores, which
//! is what a deployment could actually do. Both styles use the same
//! candidate sweep and the same decision rule.

use crate::extract::Fingerprint;
use crate::matcher::{MatcherParams, MatchError, NeighborIndex, FingerprintLibrary};
use crate::seeds::derive_rng;
use crate::signal::SignalConfig;
use rand::seq::index::sample;
use std::collections::BTreeMap;
use thiserror::Error;

/// Errors from evaluation runs.
#[derive(Debug, Error)]
pub enum EvalError {
    #[error("score class `{0}` is empty")]
    EmptyClass(&'static str),
    #[error("far cap {0} is outside [0, 1]")]
    BadFarCap(f64),
    #[error("device `{device}` missing from the {dataset} dataset")]
    MissingDataset { device: String, dataset: &'static str },
    #[error("device `{device}` has {have} fingerprints, need at least {need}")]
    TooFewFingerprints {
        device: String,
        have: usize,
        need: usize,
    },
    #[error("scores contain non-finite values")]
    NonFiniteScore,
    #[error(transparent)]
    Matcher(#[from] MatchError),
}

/// A named evaluation setup: which devices participate, which datasets
/// provide library and probe fingerprints, and the batch size in play.
#[derive(Clone, Debug)]
pub struct EvalScenario {
    pub devices: Vec<String>,
    /// Rotate every device through the legitimate role (the standard
    /// protocol); with `false`, only the first device defends.
    pub legit_rotation: bool,
    pub n_csi: usize,
    /// Tag of the dataset used for enrollment.
    pub library_source: String,
    /// Tag of the held-out dataset used for probes; must be disjoint from
    /// the library source.
    pub probe_source: String,
    /// Independent repetitions of the protocol; multi-trial runners derive
    /// one seed per trial from this count.
    pub trials: usize,
    /// Random-sampling seed for attacker balancing.
    pub balance_seed: u64,
}

/// One attacker's scores against one legitimate identity.
#[derive(Clone, Debug, PartialEq)]
pub struct RotationCell {
    pub attacker: String,
    /// KNN distances of the attacker's balanced probes against the
    /// legitimate library.
    pub scores: Vec<f64>,
}

/// All scores collected while one device held the legitimate role.
#[derive(Clone, Debug, PartialEq)]
pub struct DeviceRotation {
    pub device: String,
    /// Distances of the device's own held-out probes (false alarms come
    /// from here).
    pub legit_scores: Vec<f64>,
    /// One cell per attacker.
    pub attack_cells: Vec<RotationCell>,
}

impl DeviceRotation {
    /// All attack scores pooled across attackers.
    pub fn pooled_attack_scores(&self) -> Vec<f64> {
        self.attack_cells
            .iter()
            .flat_map(|c| c.scores.iter().copied())
            .collect()
    }
}

/// The full rotation: one entry per legitimate role.
#[derive(Clone, Debug, PartialEq)]
pub struct RotationResult {
    pub n_csi: usize,
    pub devices: Vec<DeviceRotation>,
}

/// Runs the rotation protocol over pre-extracted fingerprint datasets.
///
/// For each legitimate device: enroll its `library` fingerprints, score its
/// own `probes` (legit class), then score every other device's probes
/// (attack class), down-sampled per cell to the smallest attacker probe
/// count so every attacker contributes equally.
pub fn run_rotation(
    config: &SignalConfig,
    scenario: &EvalScenario,
    library: &BTreeMap<String, Vec<Fingerprint>>,
    probes: &BTreeMap<String, Vec<Fingerprint>>,
    params: &MatcherParams,
) -> Result<RotationResult, EvalError> {
    for device in &scenario.devices {
        if !library.contains_key(device) {
            return Err(EvalError::MissingDataset {
                device: device.clone(),
                dataset: "library",
            });
        }
        if !probes.contains_key(device) {
            return Err(EvalError::MissingDataset {
                device: device.clone(),
                dataset: "probe",
            });
        }
    }
    let legit_roles: Vec<&String> = if scenario.legit_rotation {
        scenario.devices.iter().collect()
    } else {
        scenario.devices.iter().take(1).collect()
    };
    // Equal attacker contributions: every cell uses the same probe count.
    let balance = scenario
        .devices
        .iter()
        .map(|d| probes[d].len())
        .min()
        .unwrap_or(0);
    let mut devices = Vec::with_capacity(legit_roles.len());
    for legit in legit_roles {
        let lib = FingerprintLibrary::for_config(config).enroll(
            legit,
            &library[legit],
            false,
        )?;
        let index = NeighborIndex::build(&lib, params, legit)?;
        let legit_scores = index.distances_batch(probes[legit].iter())?;
        let mut attack_cells = Vec::new();
        for attacker in &scenario.devices {
            if attacker == legit {
                continue;
            }
            let pool = &probes[attacker];
            let chosen = balanced_subset(pool, balance, scenario.balance_seed, legit, attacker);
            let scores = index.distances_batch(chosen.into_iter())?;
            attack_cells.push(RotationCell {
                attacker: attacker.clone(),
                scores,
            });
        }
        devices.push(DeviceRotation {
            device: legit.clone(),
            legit_scores,
            attack_cells,
        });
    }
    Ok(RotationResult {
        n_csi: scenario.n_csi,
        devices,
    })
}

/// Runs the rotation once per matcher parameterization (e.g. different K
/// rules or feature views) over the same datasets.
pub fn run_rotation_grid(
    config: &SignalConfig,
    scenario: &EvalScenario,
    library: &BTreeMap<String, Vec<Fingerprint>>,
    probes: &BTreeMap<String, Vec<Fingerprint>>,
    params_grid: &[MatcherParams],
) -> Result<Vec<(MatcherParams, RotationResult)>, EvalError> {
    params_grid
        .iter()
        .map(|params| {
            run_rotation(config, scenario, library, probes, params)
                .map(|result| (*params, result))
        })
        .collect()
}

/// Deterministically down-samples `pool` to `count` probes, preserving
/// order. The seed is derived per (legit, attacker) cell so cells are
/// independent of evaluation order.
fn balanced_subset<'a>(
    pool: &'a [Fingerprint],
    count: usize,
    balance_seed: u64,
    legit: &str,
    attacker: &str,
) -> Vec<&'a Fingerprint> {
    if pool.len() <= count {
        return pool.iter().collect();
    }
    let mut rng = derive_rng(balance_seed, &["balance", legit, attacker]);
    let mut indices = sample(&mut rng, pool.len(), count).into_vec();
    indices.sort_unstable();
    indices.into_iter().map(|i| &pool[i]).collect()
}

/// An operating point on the ADR/FAR trade-off.
///
/// Scores are distances: a probe is accepted when its score is at or below
/// the threshold. FAR is the fraction of legitimate probes rejected; ADR
/// is the fraction of attack probes rejected.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OperatingPoint {
    pub far_cap: f64,
    pub threshold: f64,
    pub adr: f64,
    pub far: f64,
}

/// Every threshold that can change the confusion counts: the unique scores
/// themselves, the midpoints between consecutive unique scores, and ±∞
/// sentinels. Sorted ascending.
fn candidate_thresholds(legit: &[f64], attack: &[f64]) -> Vec<f64> {
    let mut unique: Vec<f64> = legit.iter().chain(attack).copied().collect();
    unique.sort_unstable_by(|a, b| a.partial_cmp(b).expect("scores are finite"));
    unique.dedup();
    let mut candidates = Vec::with_capacity(2 * unique.len() + 2);
    candidates.push(f64::NEG_INFINITY);
    for (i, &s) in unique.iter().enumerate() {
        candidates.push(s);
        if let Some(&next) = unique.get(i + 1) {
            candidates.push(s + (next - s) / 2.0);
        }
    }
    candidates.push(f64::INFINITY);
    candidates
}

/// Fraction of `sorted` strictly above `t`, i.e. the rejection rate at
/// threshold `t` under the accept-at-or-below rule.
fn frac_above(sorted: &[f64], t: f64) -> f64 {
    let le = sorted.partition_point(|&s| s <= t);
    (sorted.len() - le) as f64 / sorted.len() as f64
}

fn validate_scores(scores: &[f64], class: &'static str) -> Result<(), EvalError> {
    if scores.is_empty() {
        return Err(EvalError::EmptyClass(class));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(EvalError::NonFiniteScore);
    }
    Ok(())
}

/// Picks the operating point with the highest ADR whose FAR stays within
/// `far_cap`: equivalently, the smallest candidate threshold that meets
/// the cap, since both rates fall as the threshold rises. A threshold of
/// +∞ always satisfies the cap, so a point always exists.
pub fn adr_at_far(
    legit: &[f64],
    attack: &[f64],
    far_cap: f64,
) -> Result<OperatingPoint, EvalError> {
    if !(0.0..=1.0).contains(&far_cap) {
        return Err(EvalError::BadFarCap(far_cap));
    }
    validate_scores(legit, "legit")?;
    validate_scores(attack, "attack")?;
    let mut legit_sorted = legit.to_vec();
    legit_sorted.sort_unstable_by(|a, b| a.partial_cmp(b).expect("scores are finite"));
    let mut attack_sorted = attack.to_vec();
    attack_sorted.sort_unstable_by(|a, b| a.partial_cmp(b).expect("scores are finite"));
    for t in candidate_thresholds(legit, attack) {
        let far = frac_above(&legit_sorted, t);
        if far <= far_cap {
            return Ok(OperatingPoint {
                far_cap,
                threshold: t,
                adr: frac_above(&attack_sorted, t),
                far,
            });
        }
    }
    unreachable!("threshold +inf always satisfies the cap");
}

/// A threshold calibrated without test data, then measured on test data.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CalibratedPoint {
    pub far_cap: f64,
    pub threshold: f64,
    /// FAR on the calibration scores (≤ far_cap by construction).
    pub calibration_far: f64,
    /// ADR measured on the test attack scores.
    pub adr: f64,
    /// FAR measured on the test legit scores; may exceed the cap.
    pub far: f64,
}

/// Picks the smallest candidate threshold whose false-alarm rate on
/// `scores` meets the cap, returning the threshold and the rate it
/// achieves.  This is the calibration step shared by deployment-style
/// evaluation and library enrollment: given only legitimate-self scores
/// (e.g. leave-one-out distances), it fixes the operating threshold
/// before any attack data is seen.
pub fn threshold_at_far(scores: &[f64], far_cap: f64) -> Result<(f64, f64), EvalError> {
    if !(0.0..=1.0).contains(&far_cap) {
        return Err(EvalError::BadFarCap(far_cap));
    }
    validate_scores(scores, "calibration")?;
    let mut sorted = scores.to_vec();
    sorted.sort_unstable_by(|a, b| a.partial_cmp(b).expect("scores are finite"));
    for t in candidate_thresholds(scores, &[]) {
        let far = frac_above(&sorted, t);
        if far <= far_cap {
            return Ok((t, far));
        }
    }
    unreachable!("threshold +inf always satisfies the cap");
}

/// Deployment-style operating point: the threshold is the smallest
/// candidate whose FAR on `calibration` scores meets the cap; ADR and FAR
/// are then measured on the held-out test scores.
pub fn calibrated_adr_at_far(
    calibration: &[f64],
    legit: &[f64],
    attack: &[f64],
    far_cap: f64,
) -> Result<CalibratedPoint, EvalError> {
    let (threshold, calibration_far) = threshold_at_far(calibration, far_cap)?;
    validate_scores(legit, "legit")?;
    validate_scores(attack, "attack")?;
    let mut legit_sorted = legit.to_vec();
    legit_sorted.sort_unstable_by(|a, b| a.partial_cmp(b).expect("scores are finite"));
    let mut attack_sorted = attack.to_vec();
    attack_sorted.sort_unstable_by(|a, b| a.partial_cmp(b).expect("scores are finite"));
    Ok(CalibratedPoint {
        far_cap,
        threshold,
        calibration_far,
        adr: frac_above(&attack_sorted, threshold),
        far: frac_above(&legit_sorted, threshold),
    })
}

/// Leave-one-out scores of a library against itself: each fingerprint is
/// scored against the library with itself removed, so no probe ever
/// matches against its own enrollment. This is the legitimate-class
/// distribution a deployment can estimate without extra data.
pub fn leave_one_out_scores(
    library_fps: &[Fingerprint],
    params: &MatcherParams,
) -> Result<Vec<f64>, EvalError> {
    if library_fps.len() < 2 {
        return Err(EvalError::TooFewFingerprints {
            device: library_fps
                .first()
                .and_then(|f| f.device_claim.clone())
                .unwrap_or_default(),
            have: library_fps.len(),
            need: 2,
        });
    }
    let n_tones = library_fps[0].values.len();
    let digest = 0; // digest is irrelevant for an in-memory split
    let mut scores = Vec::with_capacity(library_fps.len());
    let mut rest: Vec<Fingerprint> = Vec::with_capacity(library_fps.len() - 1);
    for i in 0..library_fps.len() {
        rest.clear();
        rest.extend_from_slice(&library_fps[..i]);
        rest.extend_from_slice(&library_fps[i + 1..]);
        let lib = FingerprintLibrary::new(digest, n_tones).enroll("self", &rest, false)?;
        let index = NeighborIndex::build(&lib, params, "self")?;
        scores.push(index.distance(&library_fps[i])?);
    }
    Ok(scores)
}

/// One point of a stepwise ROC curve.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RocPoint {
    pub far: f64,
    pub adr: f64,
}

/// Exhaustive threshold sweep: one point per candidate threshold, deduped
/// and sorted by (FAR, ADR). Both rates are monotone in the threshold, so
/// the sorted sequence is non-decreasing in both coordinates.
pub fn roc_curve(legit: &[f64], attack: &[f64]) -> Result<Vec<RocPoint>, EvalError> {
    validate_scores(legit, "legit")?;
    validate_scores(attack, "attack")?;
    let mut legit_sorted = legit.to_vec();
    legit_sorted.sort_unstable_by(|a, b| a.partial_cmp(b).expect("scores are finite"));
    let mut attack_sorted = attack.to_vec();
    attack_sorted.sort_unstable_by(|a, b| a.partial_cmp(b).expect("scores are finite"));
    let mut points: Vec<RocPoint> = candidate_thresholds(legit, attack)
        .into_iter()
        .map(|t| RocPoint {
            far: frac_above(&legit_sorted, t),
            adr: frac_above(&attack_sorted, t),
        })
        .collect();
    points.sort_by(|a, b| {
        (a.far, a.adr)
            .partial_cmp(&(b.far, b.adr))
            .expect("rates are finite")
    });
    points.dedup();
    Ok(points)
}

/// Area under the ROC curve by trapezoidal rule over FAR.
pub fn roc_auc(curve: &[RocPoint]) -> f64 {
    curve
        .windows(2)
        .map(|w| (w[1].far - w[0].far) * (w[0].adr + w[1].adr) / 2.0)
        .sum()
}

/// Per-attacker detection at one device's operating point.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackerAdr {
    pub attacker: String,
    pub adr: f64,
}

/// One device's operating point with its per-attacker breakdown.
#[derive(Clone, Debug, PartialEq)]
pub struct DeviceOperatingPoint {
    pub device: String,
    pub threshold: f64,
    pub far: f64,
    /// Mean over this device's attack cells.
    pub adr: f64,
    pub per_attacker: Vec<AttackerAdr>,
}

/// Rotation-wide summary at one FAR cap.
#[derive(Clone, Debug, PartialEq)]
pub struct RotationSummary {
    pub n_csi: usize,
    pub far_cap: f64,
    /// Mean ADR over all attack cells (devices × attackers).
    pub mean_adr: f64,
    /// Mean FAR over devices.
    pub mean_far: f64,
    pub per_device: Vec<DeviceOperatingPoint>,
}

impl RotationResult {
    /// Oracle-style summary: each device's threshold is chosen from its
    /// own test scores (legit vs pooled attacks) at the cap, then applied
    /// to every attack cell.
    pub fn summarize(&self, far_cap: f64) -> Result<RotationSummary, EvalError> {
        self.summarize_with(far_cap, |device| {
            let pooled = device.pooled_attack_scores();
            let point = adr_at_far(&device.legit_scores, &pooled, far_cap)?;
            Ok(point.threshold)
        })
    }

    /// Deployment-style summary: each device's threshold comes from
    /// externally supplied calibration scores (e.g. leave-one-out over its
    /// library), never from test data.
    pub fn summarize_calibrated(
        &self,
        calibration: &BTreeMap<String, Vec<f64>>,
        far_cap: f64,
    ) -> Result<RotationSummary, EvalError> {
        self.summarize_with(far_cap, |device| {
            let cal = calibration
                .get(&device.device)
                .ok_or_else(|| EvalError::MissingDataset {
                    device: device.device.clone(),
                    dataset: "calibration",
                })?;
            let point = calibrated_adr_at_far(
                cal,
                &device.legit_scores,
                &device.pooled_attack_scores(),
                far_cap,
            )?;
            Ok(point.threshold)
        })
    }

    fn summarize_with(
        &self,
        far_cap: f64,
        mut pick_threshold: impl FnMut(&DeviceRotation) -> Result<f64, EvalError>,
    ) -> Result<RotationSummary, EvalError> {
        if !(0.0..=1.0).contains(&far_cap) {
            return Err(EvalError::BadFarCap(far_cap));
        }
        let mut per_device = Vec::with_capacity(self.devices.len());
        let mut cell_adrs = Vec::new();
        let mut far_sum = 0.0;
        for device in &self.devices {
            validate_scores(&device.legit_scores, "legit")?;
            let threshold = pick_threshold(device)?;
            let mut legit_sorted = device.legit_scores.clone();
            legit_sorted
                .sort_unstable_by(|a, b| a.partial_cmp(b).expect("scores are finite"));
            let far = frac_above(&legit_sorted, threshold);
            let mut per_attacker = Vec::with_capacity(device.attack_cells.len());
            let mut adr_sum = 0.0;
            for cell in &device.attack_cells {
                validate_scores(&cell.scores, "attack")?;
                let mut sorted = cell.scores.clone();
                sorted.sort_unstable_by(|a, b| a.partial_cmp(b).expect("scores are finite"));
                let adr = frac_above(&sorted, threshold);
                adr_sum += adr;
                cell_adrs.push(adr);
                per_attacker.push(AttackerAdr {
                    attacker: cell.attacker.clone(),
                    adr,
                });
            }
            let adr = if per_attacker.is_empty() {
                0.0
            } else {
                adr_sum / per_attacker.len() as f64
            };
            far_sum += far;
            per_device.push(DeviceOperatingPoint {
                device: device.device.clone(),
                threshold,
                far,
                adr,
                per_attacker,
            });
        }
        let mean_adr = if cell_adrs.is_empty() {
            0.0
        } else {
            cell_adrs.iter().sum::<f64>() / cell_adrs.len() as f64
        };
        let mean_far = if per_device.is_empty() {
            0.0
        } else {
            far_sum / per_device.len() as f64
        };
        Ok(RotationSummary {
            n_csi: self.n_csi,
            far_cap,
            mean_adr,
            mean_far,
            per_device,
        })
    }
}

/// Per-tone fingerprint dispersion for one device.
#[derive(Clone, Debug, PartialEq)]
pub struct StabilityRow {
    pub device: String,
    /// Signed subcarrier offset (plot x-axis).
    pub tone_offset: i32,
    /// Sample variance of the complex value: mean |v − v̄|² with n−1
    /// normalization.
    pub complex_variance: f64,
    /// Sample variance of |v|.
    pub amplitude_variance: f64,
    /// Sample variance of arg v in rad²; fingerprints cluster near 1+0i,
    /// so phases stay far from the ±π wrap.
    pub phase_variance: f64,
}

/// Per-device, per-tone variance of repeated fingerprints: which tones are
/// stable (and thus informative) for each device.
pub fn stability_report(
    config: &SignalConfig,
    fingerprints_by_device: &BTreeMap<String, Vec<Fingerprint>>,
) -> Result<Vec<StabilityRow>, EvalError> {
    let mut rows = Vec::new();
    for (device, fps) in fingerprints_by_device {
        if fps.len() < 2 {
            return Err(EvalError::TooFewFingerprints {
                device: device.clone(),
                have: fps.len(),
                need: 2,
            });
        }
        for fp in fps {
            if fp.values.len() != config.n_tones() {
                return Err(EvalError::Matcher(MatchError::LengthMismatch {
                    expected: config.n_tones(),
                    got: fp.values.len(),
                }));
            }
        }
        let n = fps.len() as f64;
        for (tone, &offset) in config.offsets().iter().enumerate() {
            let values: Vec<num_complex::Complex64> =
                fps.iter().map(|f| f.values[tone]).collect();
            let mean = values.iter().sum::<num_complex::Complex64>() / n;
            let complex_variance =
                values.iter().map(|v| (v - mean).norm_sqr()).sum::<f64>() / (n - 1.0);
            let amps: Vec<f64> = values.iter().map(|v| v.norm()).collect();
            let phases: Vec<f64> = values.iter().map(|v| v.arg()).collect();
            rows.push(StabilityRow {
                device: device.clone(),
                tone_offset: offset,
                complex_variance,
                amplitude_variance: sample_variance(&amps),
                phase_variance: sample_variance(&phases),
            });
        }
    }
    Ok(rows)
}

fn sample_variance(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
}
