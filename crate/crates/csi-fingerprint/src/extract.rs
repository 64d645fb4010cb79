//! Fingerprint extraction: averaging, channel estimation, channel
//! cancellation.
//!
//! A batch of CSI measurements of one device is averaged tone-wise to beat
//! down noise, the average is projected onto the tap-response span to
//! estimate the channel alone, and dividing the average by that estimate
//! cancels the channel:
//!
//! ```text
//! c̄ = mean(csi)            # noise variance drops as σ²/M
//! ĥ = P(c̄)                 # orthogonal projection onto the tap span
//! f̂ = c̄ ./ ĥ  ≈  1 + f     # channel-independent device fingerprint
//! ```
//!
//! The division is exact channel cancellation whenever the true channel
//! lies in the tap span and the distortion contributes nothing to the
//! projection; the general-case residual is characterized (and tested)
//! exactly in this module.
//!
//! [`StreamExtractor`] runs the same computation incrementally over a
//! measurement stream. It accumulates per `(chain, batch)` keyed by
//! sequence number, so packet-major live streams and chain-major trace
//! files produce bit-identical fingerprints.

use crate::signal::{SignalConfig, ToneVector};
use crate::sim::CsiMeasurement;
use num_complex::Complex64;
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

/// Errors from averaging or extraction.
#[derive(Debug, Error)]
pub enum ExtractError {
    #[error("cannot average an empty batch")]
    EmptyBatch,
    #[error("batch mixes devices `{first}` and `{second}`")]
    MixedDevices { first: String, second: String },
    #[error("measurement has {got} tones, config wants {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("measurement from device `{device}` (chain {chain}, seq {seq_no}) has non-finite CSI")]
    NonFinite {
        device: String,
        chain: u8,
        seq_no: u64,
    },
    #[error(
        "channel estimate collapsed on tone {tone} (|h| = {magnitude:.3e} < floor {floor:.3e}); \
         no meaningful fingerprint exists"
    )]
    DeepFade {
        tone: usize,
        magnitude: f64,
        floor: f64,
    },
    #[error(
        "extracted fingerprint is implausible (mean magnitude {mean_abs:.3}); \
         expected within [{lo}, {hi}] of unity"
    )]
    Implausible { mean_abs: f64, lo: f64, hi: f64 },
    #[error("batches need at least one measurement per fingerprint")]
    ZeroBatchSize,
    #[error(
        "chain {chain} batch {batch} of device `{device}` received more than {capacity} measurements; \
         duplicate sequence numbers?"
    )]
    OverfullBatch {
        device: String,
        chain: u8,
        batch: u64,
        capacity: usize,
    },
}

/// The tone-wise mean of a batch of measurements from one device.
#[derive(Clone, Debug, PartialEq)]
pub struct AveragedCsi {
    /// Mean CSI per tone, map order.
    pub mean_csi: ToneVector,
    /// Number of measurements averaged.
    pub n_used: usize,
    /// Receive chains that contributed.
    pub source_chains: BTreeSet<u8>,
    /// Earliest measurement timestamp in the batch.
    pub first_timestamp_us: u64,
}

/// A channel-cancelled device fingerprint, `≈ 1 + f` per tone.
#[derive(Clone, Debug, PartialEq)]
pub struct Fingerprint {
    /// Fingerprint value per tone, map order.
    pub values: ToneVector,
    /// Measurements averaged per receive chain to produce this fingerprint.
    pub n_csi: usize,
    /// The device the source measurements claimed to come from, when known.
    pub device_claim: Option<String>,
    /// Timestamp of the earliest contributing measurement.
    pub extracted_at: u64,
}

/// Averages a batch tone-wise. The batch must be nonempty, single-device,
/// uniform in length, and finite.
pub fn average_measurements(batch: &[CsiMeasurement]) -> Result<AveragedCsi, ExtractError> {
    let first = batch.first().ok_or(ExtractError::EmptyBatch)?;
    let n_tones = first.csi.len();
    let mut sum = vec![Complex64::new(0.0, 0.0); n_tones];
    let mut chains = BTreeSet::new();
    let mut first_ts = u64::MAX;
    for m in batch {
        if m.device_id != first.device_id {
            return Err(ExtractError::MixedDevices {
                first: first.device_id.clone(),
                second: m.device_id.clone(),
            });
        }
        if m.csi.len() != n_tones {
            return Err(ExtractError::LengthMismatch {
                expected: n_tones,
                got: m.csi.len(),
            });
        }
        if !m.csi.is_finite() {
            return Err(ExtractError::NonFinite {
                device: m.device_id.clone(),
                chain: m.rx_chain,
                seq_no: m.seq_no,
            });
        }
        for (acc, v) in sum.iter_mut().zip(m.csi.iter()) {
            *acc += v;
        }
        chains.insert(m.rx_chain);
        first_ts = first_ts.min(m.timestamp_us);
    }
    let scale = 1.0 / batch.len() as f64;
    let mean_csi = ToneVector::new(sum.into_iter().map(|v| v * scale).collect());
    Ok(AveragedCsi {
        mean_csi,
        n_used: batch.len(),
        source_chains: chains,
        first_timestamp_us: first_ts,
    })
}

/// Least-squares channel estimate: the projection of the averaged CSI onto
/// the span of leak-window tap responses. Distortion and noise components
/// orthogonal to that span are rejected; anything inside it is attributed
/// to the channel.
pub fn estimate_channel(config: &SignalConfig, avg: &AveragedCsi) -> ToneVector {
    config.project_onto_taps(&avg.mean_csi)
}

/// Relative floor on channel-estimate magnitudes: tones this far below the
/// strongest estimated tone are treated as fades rather than divided by.
const FADE_FLOOR_RATIO: f64 = 1e-6;

/// Sanity band on the mean fingerprint magnitude; distortions are small
/// against 1, so a mean far from unity means the input was not a
/// plausible CSI batch.
const PLAUSIBLE_LO: f64 = 0.5;
const PLAUSIBLE_HI: f64 = 2.0;

/// Extracts the fingerprint from an averaged batch: estimate the channel,
/// divide it out, and sanity-check the result.
pub fn extract_fingerprint(
    config: &SignalConfig,
    avg: &AveragedCsi,
) -> Result<Fingerprint, ExtractError> {
    if avg.mean_csi.len() != config.n_tones() {
        return Err(ExtractError::LengthMismatch {
            expected: config.n_tones(),
            got: avg.mean_csi.len(),
        });
    }
    let estimate = estimate_channel(config, avg);
    let floor = FADE_FLOOR_RATIO * estimate.max_abs();
    if floor == 0.0 {
        return Err(ExtractError::DeepFade {
            tone: 0,
            magnitude: 0.0,
            floor: 0.0,
        });
    }
    for (tone, h) in estimate.iter().enumerate() {
        let magnitude = h.norm();
        if magnitude < floor {
            return Err(ExtractError::DeepFade {
                tone,
                magnitude,
                floor,
            });
        }
    }
    let values = avg.mean_csi.div_elem(&estimate);
    let mean_abs =
        values.iter().map(|v| v.norm()).sum::<f64>() / values.len().max(1) as f64;
    if !(PLAUSIBLE_LO..=PLAUSIBLE_HI).contains(&mean_abs) {
        return Err(ExtractError::Implausible {
            mean_abs,
            lo: PLAUSIBLE_LO,
            hi: PLAUSIBLE_HI,
        });
    }
    // An averaged batch does not carry the device id; stream extraction
    // fills the claim in afterwards.
    Ok(Fingerprint {
        values,
        n_csi: avg.n_used,
        device_claim: None,
        extracted_at: avg.first_timestamp_us,
    })
}

/// How multiple receive chains are merged into one fingerprint per batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChainCombining {
    /// Extract one fingerprint per chain, then average the fingerprints.
    /// Chain-specific distortion differences are preserved in the mean.
    PerChain,
    /// Average all chains' CSI into one batch mean, then extract once.
    /// Cheaper, but mixes channels of different chains before projection.
    Pooled,
}

impl std::fmt::Display for ChainCombining {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ChainCombining::PerChain => write!(f, "per-chain"),
            ChainCombining::Pooled => write!(f, "pooled"),
        }
    }
}

impl std::str::FromStr for ChainCombining {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "per-chain" => Ok(ChainCombining::PerChain),
            "pooled" => Ok(ChainCombining::Pooled),
            other => Err(format!(
                "unknown chain combining `{other}` (expected `per-chain` or `pooled`)"
            )),
        }
    }
}

#[derive(Clone)]
struct BatchAccum {
    sum: Vec<Complex64>,
    count: usize,
    first_ts: u64,
}

/// Incremental fingerprint extraction over a measurement stream.
///
/// Measurements are grouped into batches of `n_csi` consecutive sequence
/// numbers per `(device, chain)`; the grouping is keyed, not positional, so
/// any arrival order that preserves per-chain sequence numbering — live
/// packet-major capture, chain-major trace files — yields bit-identical
/// fingerprints. Incomplete trailing batches, and batches missing on some
/// chain of a device, are discarded.
pub struct StreamExtractor {
    config: SignalConfig,
    n_csi: usize,
    combining: ChainCombining,
    accums: BTreeMap<String, BTreeMap<(u8, u64), BatchAccum>>,
}

impl StreamExtractor {
    pub fn new(
        config: &SignalConfig,
        n_csi: usize,
        combining: ChainCombining,
    ) -> Result<Self, ExtractError> {
        if n_csi == 0 {
            return Err(ExtractError::ZeroBatchSize);
        }
        Ok(StreamExtractor {
            config: config.clone(),
            n_csi,
            combining,
            accums: BTreeMap::new(),
        })
    }

    pub fn n_csi(&self) -> usize {
        self.n_csi
    }

    pub fn combining(&self) -> ChainCombining {
        self.combining
    }

    /// Feeds one measurement. Validation failures leave the extractor
    /// usable; the offending measurement is simply not absorbed.
    pub fn push(&mut self, m: &CsiMeasurement) -> Result<(), ExtractError> {
        if m.csi.len() != self.config.n_tones() {
            return Err(ExtractError::LengthMismatch {
                expected: self.config.n_tones(),
                got: m.csi.len(),
            });
        }
        if !m.csi.is_finite() {
            return Err(ExtractError::NonFinite {
                device: m.device_id.clone(),
                chain: m.rx_chain,
                seq_no: m.seq_no,
            });
        }
        let batch = m.seq_no / self.n_csi as u64;
        let n_tones = self.config.n_tones();
        let accum = self
            .accums
            .entry(m.device_id.clone())
            .or_default()
            .entry((m.rx_chain, batch))
            .or_insert_with(|| BatchAccum {
                sum: vec![Complex64::new(0.0, 0.0); n_tones],
                count: 0,
                first_ts: u64::MAX,
            });
        if accum.count == self.n_csi {
            return Err(ExtractError::OverfullBatch {
                device: m.device_id.clone(),
                chain: m.rx_chain,
                batch,
                capacity: self.n_csi,
            });
        }
        for (acc, v) in accum.sum.iter_mut().zip(m.csi.iter()) {
            *acc += v;
        }
        accum.count += 1;
        accum.first_ts = accum.first_ts.min(m.timestamp_us);
        Ok(())
    }

    /// Finalizes all devices: one fingerprint per batch index that is
    /// complete on every chain the device was seen on, in batch order.
    pub fn finish(self) -> Result<BTreeMap<String, Vec<Fingerprint>>, ExtractError> {
        let n_csi = self.n_csi;
        let inv_n = 1.0 / n_csi as f64;
        let mut out = BTreeMap::new();
        for (device, batches) in self.accums {
            let chains: BTreeSet<u8> = batches.keys().map(|&(c, _)| c).collect();
            let batch_ids: BTreeSet<u64> = batches.keys().map(|&(_, b)| b).collect();
            let mut fps = Vec::new();
            'batch: for &b in &batch_ids {
                // Collect this batch's per-chain means, chain order.
                let mut means: Vec<(u8, ToneVector)> = Vec::with_capacity(chains.len());
                let mut first_ts = u64::MAX;
                for &c in &chains {
                    match batches.get(&(c, b)) {
                        Some(acc) if acc.count == n_csi => {
                            let mean =
                                ToneVector::new(acc.sum.iter().map(|&v| v * inv_n).collect());
                            first_ts = first_ts.min(acc.first_ts);
                            means.push((c, mean));
                        }
                        // Incomplete on some chain: drop the whole batch.
                        _ => continue 'batch,
                    }
                }
                let fp = match self.combining {
                    ChainCombining::PerChain => {
                        let mut value_sum = ToneVector::zeros(self.config.n_tones());
                        for (c, mean) in &means {
                            let avg = AveragedCsi {
                                mean_csi: mean.clone(),
                                n_used: n_csi,
                                source_chains: BTreeSet::from([*c]),
                                first_timestamp_us: first_ts,
                            };
                            let fp = extract_fingerprint(&self.config, &avg)?;
                            value_sum = value_sum.add(&fp.values);
                        }
                        let scale = Complex64::new(1.0 / means.len() as f64, 0.0);
                        Fingerprint {
                            values: value_sum.scale(scale),
                            n_csi,
                            device_claim: Some(device.clone()),
                            extracted_at: first_ts,
                        }
                    }
                    ChainCombining::Pooled => {
                        let mut pooled = ToneVector::zeros(self.config.n_tones());
                        for (_, mean) in &means {
                            pooled = pooled.add(mean);
                        }
                        let pooled =
                            pooled.scale(Complex64::new(1.0 / means.len() as f64, 0.0));
                        let avg = AveragedCsi {
                            mean_csi: pooled,
                            n_used: n_csi * means.len(),
                            source_chains: chains.clone(),
                            first_timestamp_us: first_ts,
                        };
                        let mut fp = extract_fingerprint(&self.config, &avg)?;
                        fp.n_csi = n_csi;
                        fp.device_claim = Some(device.clone());
                        fp
                    }
                };
                fps.push(fp);
            }
            out.insert(device, fps);
        }
        Ok(out)
    }
}

/// Runs a whole simulated session through a [`StreamExtractor`] and returns
/// that device's fingerprints.
pub fn extract_session(
    config: &SignalConfig,
    session: crate::sim::Session,
    n_csi: usize,
    combining: ChainCombining,
) -> Result<Vec<Fingerprint>, ExtractError> {
    let device = session.device_id().to_string();
    let mut extractor = StreamExtractor::new(config, n_csi, combining)?;
    for m in session {
        extractor.push(&m)?;
    }
    let mut map = extractor.finish()?;
    Ok(map.remove(&device).unwrap_or_default())
}
