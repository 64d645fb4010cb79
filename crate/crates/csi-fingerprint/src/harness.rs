//! End-to-end simulated experiments: device populations, two-session
//! datasets, rotation evaluation, and the batch-size trend.
//!
//! The harness wires the simulator, the extractor, and the evaluation
//! protocol into one reproducible experiment. Every random draw descends
//! from a single master seed, so a full experiment is a pure function of
//! its parameters. Library and probe fingerprints come from two sessions
//! with different labels ("a" and "b"), which gives each device
//! independent channel realizations and noise in the two roles — the
//! enrolled and probing conditions never share an environment.

use crate::eval::{
    run_rotation, EvalError, EvalScenario, RotationResult, RotationSummary,
    leave_one_out_scores,
};
use crate::extract::{extract_session, ChainCombining, ExtractError, Fingerprint};
use crate::matcher::MatcherParams;
use crate::signal::SignalConfig;
use crate::sim::{
    make_correlated_profile, make_device_profile, ChannelMode, DeviceProfile, Pulse,
    Session, SessionParams, SimError,
};
use std::collections::BTreeMap;
use thiserror::Error;

/// Errors from experiment composition.
#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("batch size {n_csi} does not divide the packet count {n_packets}")]
    BadBatchSplit { n_packets: usize, n_csi: usize },
    #[error("experiment needs at least 2 devices, got {0}")]
    TooFewDevices(usize),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Extract(#[from] ExtractError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Label of the enrollment session.
pub const LIBRARY_SESSION: &str = "a";
/// Label of the held-out probe session.
pub const PROBE_SESSION: &str = "b";

/// Full parameterization of one simulated experiment.
#[derive(Clone, Debug)]
pub struct ExperimentParams {
    pub n_devices: usize,
    /// Packets per device per session.
    pub n_packets: usize,
    pub n_rx_chains: usize,
    pub packet_interval_us: u64,
    /// Distortion RMS in dB (20·log10 of the per-tone RMS).
    pub magnitude_db: f64,
    /// Spectral smoothness of distortion profiles in [0, 1]. The default
    /// 0.9 leaves only a sliver of distortion energy outside the modeled
    /// tap span, which is what makes small batches genuinely hard and
    /// reproduces the steep detection-vs-batch-size curve.
    pub smoothness: f64,
    /// Per-tone complex noise σ. The default 0.1 against −25 dB distortion
    /// puts the per-measurement distortion-to-noise ratio at −5 dB: raw
    /// measurements are useless and only averaging exposes the fingerprint.
    pub noise_sigma: f64,
    /// RMS of per-chain distortion perturbations (0 = identical chains).
    pub chain_perturb_rms: f64,
    pub pulse: Pulse,
    pub truncated: bool,
    pub combining: ChainCombining,
    /// When set, devices are drawn as correlated pairs: each even-indexed
    /// device anchors a pair and the following device's profile correlates
    /// with it by this coefficient (same-production-run model).
    pub pair_correlation: Option<f64>,
    pub master_seed: u64,
}

impl Default for ExperimentParams {
    fn default() -> Self {
        ExperimentParams {
            n_devices: 11,
            n_packets: 60_000,
            n_rx_chains: 2,
            packet_interval_us: 50,
            magnitude_db: -25.0,
            smoothness: 0.9,
            noise_sigma: 0.1,
            chain_perturb_rms: 0.0,
            pulse: Pulse::Sinc,
            truncated: true,
            combining: ChainCombining::PerChain,
            pair_correlation: None,
            master_seed: 42,
        }
    }
}

impl ExperimentParams {
    /// The per-session simulation parameters these experiment settings
    /// imply; sharing this with out-of-process pipelines keeps their
    /// sessions identical to [`session_dataset`]'s.
    pub fn session_params(&self) -> SessionParams {
        SessionParams {
            n_packets: self.n_packets,
            n_rx_chains: self.n_rx_chains,
            packet_interval_us: self.packet_interval_us,
            noise_sigma: self.noise_sigma,
            channel: ChannelMode::RandomSinglePath,
            pulse: self.pulse,
            truncated: self.truncated,
            chain_perturb_rms: self.chain_perturb_rms,
        }
    }

    /// The rotation scenario this experiment realizes at batch size
    /// `n_csi`.
    pub fn scenario(&self, n_csi: usize) -> EvalScenario {
        EvalScenario {
            devices: device_ids(self.n_devices),
            legit_rotation: true,
            n_csi,
            library_source: LIBRARY_SESSION.to_string(),
            probe_source: PROBE_SESSION.to_string(),
            trials: 1,
            balance_seed: self.master_seed,
        }
    }
}

/// Device identifiers `dev1 … devN`.
pub fn device_ids(n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("dev{i}")).collect()
}

/// Draws the device population. Independent profiles by default; with
/// `pair_correlation` set, devices pair up (1↔2, 3↔4, …) and the second of
/// each pair correlates with the first. An odd trailing device stays
/// independent.
pub fn build_profiles(
    config: &SignalConfig,
    params: &ExperimentParams,
) -> Result<Vec<DeviceProfile>, SimError> {
    let ids = device_ids(params.n_devices);
    let mut profiles: Vec<DeviceProfile> = Vec::with_capacity(ids.len());
    for (i, id) in ids.iter().enumerate() {
        let profile = match params.pair_correlation {
            Some(rho) if i % 2 == 1 => make_correlated_profile(
                config,
                &profiles[i - 1],
                id,
                params.master_seed,
                rho,
                params.magnitude_db,
                params.smoothness,
            )?,
            _ => make_device_profile(
                config,
                id,
                params.master_seed,
                params.magnitude_db,
                params.smoothness,
            )?,
        };
        profiles.push(profile);
    }
    Ok(profiles)
}

/// Simulates one session per device and extracts fingerprints at batch
/// size `n_csi`, keyed by device id.
pub fn session_dataset(
    config: &SignalConfig,
    params: &ExperimentParams,
    profiles: &[DeviceProfile],
    session_label: &str,
    n_csi: usize,
) -> Result<BTreeMap<String, Vec<Fingerprint>>, HarnessError> {
    if n_csi == 0 || params.n_packets % n_csi != 0 {
        return Err(HarnessError::BadBatchSplit {
            n_packets: params.n_packets,
            n_csi,
        });
    }
    let session_params = params.session_params();
    let mut dataset = BTreeMap::new();
    for profile in profiles {
        let session = Session::new(
            config,
            profile,
            &session_params,
            params.master_seed,
            session_label,
        )?;
        let fps = extract_session(config, session, n_csi, params.combining)?;
        dataset.insert(profile.device_id.clone(), fps);
    }
    Ok(dataset)
}

/// Runs the full rotation experiment at one batch size: simulate both
/// sessions, extract, rotate every device through the legitimate role.
pub fn run_experiment(
    config: &SignalConfig,
    params: &ExperimentParams,
    n_csi: usize,
    matcher: &MatcherParams,
) -> Result<RotationResult, HarnessError> {
    if params.n_devices < 2 {
        return Err(HarnessError::TooFewDevices(params.n_devices));
    }
    let profiles = build_profiles(config, params)?;
    let library = session_dataset(config, params, &profiles, LIBRARY_SESSION, n_csi)?;
    let probes = session_dataset(config, params, &profiles, PROBE_SESSION, n_csi)?;
    let scenario = params.scenario(n_csi);
    Ok(run_rotation(config, &scenario, &library, &probes, matcher)?)
}

/// Leave-one-out calibration scores for every device's library, for
/// deployment-style thresholds.
pub fn library_calibration_scores(
    library: &BTreeMap<String, Vec<Fingerprint>>,
    matcher: &MatcherParams,
) -> Result<BTreeMap<String, Vec<f64>>, EvalError> {
    library
        .iter()
        .map(|(device, fps)| Ok((device.clone(), leave_one_out_scores(fps, matcher)?)))
        .collect()
}

/// One point of the batch-size trend.
#[derive(Clone, Debug)]
pub struct TrendPoint {
    pub n_csi: usize,
    pub summary: RotationSummary,
}

/// Sweeps the batch size and summarizes each rotation at `far_cap` with
/// oracle-style thresholds. More averaging suppresses more noise, so mean
/// ADR should rise along the grid.
pub fn adr_trend(
    config: &SignalConfig,
    params: &ExperimentParams,
    n_csi_grid: &[usize],
    far_cap: f64,
    matcher: &MatcherParams,
) -> Result<Vec<TrendPoint>, HarnessError> {
    let mut points = Vec::with_capacity(n_csi_grid.len());
    for &n_csi in n_csi_grid {
        let result = run_experiment(config, params, n_csi, matcher)?;
        let summary = result.summarize(far_cap)?;
        points.push(TrendPoint { n_csi, summary });
    }
    Ok(points)
}

/// Mean ADR of one experiment arm in the correlation comparison.
#[derive(Clone, Copy, Debug)]
pub struct AdrPair {
    pub seed: u64,
    pub independent: f64,
    pub correlated: f64,
}

/// Runs paired experiments per seed — one with independent device
/// profiles, one with correlated pairs — under otherwise identical
/// settings, and reports mean ADR at `far_cap` for both arms.
pub fn correlation_comparison(
    config: &SignalConfig,
    base: &ExperimentParams,
    correlation: f64,
    seeds: &[u64],
    n_csi: usize,
    far_cap: f64,
    matcher: &MatcherParams,
) -> Result<Vec<AdrPair>, HarnessError> {
    let mut pairs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut independent = base.clone();
        independent.master_seed = seed;
        independent.pair_correlation = None;
        let mut correlated = independent.clone();
        correlated.pair_correlation = Some(correlation);
        let ind_summary =
            run_experiment(config, &independent, n_csi, matcher)?.summarize(far_cap)?;
        let cor_summary =
            run_experiment(config, &correlated, n_csi, matcher)?.summarize(far_cap)?;
        pairs.push(AdrPair {
            seed,
            independent: ind_summary.mean_adr,
            correlated: cor_summary.mean_adr,
        });
    }
    Ok(pairs)
}
