//! Simulation of devices, channels, and CSI measurement streams.
//!
//! A simulated transmitter is a [`DeviceProfile`]: a small per-tone complex
//! distortion `f` that its RF front end stamps on every frame. A simulated
//! link is a [`ChannelRealization`]: a single dominant path at a fractional
//! sample delay, pulse-shaping leakage spreading it over neighboring taps.
//! A [`Session`] combines one device with per-receive-chain channels and
//! additive noise and yields [`CsiMeasurement`]s
//!
//! ```text
//! csi_k = h_k · (1 + f_k) + z_k
//! ```
//!
//! per tone `k`, which is what a receiver that divides its observation by
//! the known training symbol would report. All randomness flows through
//! [`crate::seeds::derive_rng`], so identical parameters reproduce identical
//! measurements bit for bit, regardless of iteration order.

use crate::seeds::derive_rng;
use crate::signal::{SignalConfig, ToneVector};
use num_complex::Complex64;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

/// Errors from profile, channel, or session construction.
#[derive(Debug, Error)]
pub enum SimError {
    #[error("path delay {0} is outside [0, 1)")]
    BadDelayFrac(f64),
    #[error("path gain must be nonzero and finite")]
    BadGain,
    #[error("raised-cosine rolloff {0} is outside [0, 1]")]
    BadRolloff(f64),
    #[error("unknown pulse shape `{0}` (expected `sinc` or `raised-cosine[:rolloff]`)")]
    UnknownPulse(String),
    #[error("profile smoothness {0} is outside [0, 1]")]
    BadSmoothness(f64),
    #[error("profile magnitude {0} dB is not finite (use -inf for a distortion-free device)")]
    BadMagnitude(f64),
    #[error("profile correlation {0} is outside [-1, 1]")]
    BadCorrelation(f64),
    #[error("cannot correlate against a distortion-free base profile")]
    ZeroBaseProfile,
    #[error("noise level {0} must be finite and non-negative")]
    BadSigma(f64),
    #[error("session needs at least one packet")]
    NoPackets,
    #[error("receive chain count {0} is outside 1..=256")]
    BadChainCount(usize),
    #[error("chain perturbation RMS {0} must be finite and non-negative")]
    BadPerturbation(f64),
    #[error("fixed channel list has {got} entries for {expected} chains")]
    ChannelCountMismatch { expected: usize, got: usize },
    #[error("channel tap vector has {got} taps, config wants {expected}")]
    TapCountMismatch { expected: usize, got: usize },
}

/// A transmitter identity: per-tone multiplicative distortion `f`,
/// small against 1.
#[derive(Clone, Debug, PartialEq)]
pub struct DeviceProfile {
    pub device_id: String,
    /// Distortion per tone, map order. The emitted training tone is
    /// `(1 + f_k) · t_k`.
    pub distortion: ToneVector,
    /// RMS of `distortion` in dB relative to unity; `-inf` for a
    /// distortion-free device.
    pub magnitude_db: f64,
}

/// Unnormalized profile shape: a blend of per-tone white noise and a few
/// low-order modes across the tone index. `smoothness` 0 is fully white
/// (every tone independent), 1 is fully smooth (slow curve across the band).
fn profile_shape(n_tones: usize, rng: &mut ChaCha8Rng, smoothness: f64) -> ToneVector {
    let inv_sqrt2 = std::f64::consts::FRAC_1_SQRT_2;
    let white = ToneVector::from_fn(n_tones, |_| {
        Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal)) * inv_sqrt2
    });
    // Three low-frequency modes with 1/m weighting; unit mean-square after
    // the 6/7 factor (sum of 1/m² over m = 1..3 is 49/36).
    let coefs: Vec<Complex64> = (1..=3)
        .map(|m| {
            Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal)) * inv_sqrt2
                / m as f64
        })
        .collect();
    let smooth = ToneVector::from_fn(n_tones, |k| {
        let u = k as f64 / n_tones as f64;
        coefs
            .iter()
            .enumerate()
            .map(|(i, c)| c * Complex64::from_polar(1.0, 2.0 * PI * (i + 1) as f64 * u))
            .sum::<Complex64>()
            * (6.0 / 7.0)
    });
    white
        .scale(Complex64::new(1.0 - smoothness, 0.0))
        .add(&smooth.scale(Complex64::new(smoothness, 0.0)))
}

/// Scales a shape to an exact RMS of `10^(db/20)`.
fn scale_to_magnitude(shape: &ToneVector, magnitude_db: f64) -> ToneVector {
    let target = 10f64.powf(magnitude_db / 20.0);
    let rms = shape.rms();
    assert!(rms > 0.0, "profile shape collapsed to zero");
    shape.scale(Complex64::new(target / rms, 0.0))
}

/// Builds a device distortion profile.
///
/// The shape is reproducible from `(master_seed, device_id)` alone;
/// `magnitude_db` sets the exact RMS of the distortion (−25 dB ≈ 0.056),
/// and `magnitude_db = -inf` yields an ideal distortion-free device.
pub fn make_device_profile(
    config: &SignalConfig,
    device_id: &str,
    master_seed: u64,
    magnitude_db: f64,
    smoothness: f64,
) -> Result<DeviceProfile, SimError> {
    if !(0.0..=1.0).contains(&smoothness) {
        return Err(SimError::BadSmoothness(smoothness));
    }
    if magnitude_db.is_nan() || magnitude_db == f64::INFINITY {
        return Err(SimError::BadMagnitude(magnitude_db));
    }
    if magnitude_db == f64::NEG_INFINITY {
        return Ok(DeviceProfile {
            device_id: device_id.to_string(),
            distortion: ToneVector::zeros(config.n_tones()),
            magnitude_db,
        });
    }
    let mut rng = derive_rng(master_seed, &["profile", device_id]);
    let shape = profile_shape(config.n_tones(), &mut rng, smoothness);
    Ok(DeviceProfile {
        device_id: device_id.to_string(),
        distortion: scale_to_magnitude(&shape, magnitude_db),
        magnitude_db,
    })
}

/// Builds a profile whose shape correlates with `base`'s by roughly
/// `correlation`, modeling devices from the same production run.
///
/// The result keeps its own magnitude normalization; only the shape is
/// blended (`ρ · base + √(1−ρ²) · own`).
pub fn make_correlated_profile(
    config: &SignalConfig,
    base: &DeviceProfile,
    device_id: &str,
    master_seed: u64,
    correlation: f64,
    magnitude_db: f64,
    smoothness: f64,
) -> Result<DeviceProfile, SimError> {
    if !(-1.0..=1.0).contains(&correlation) {
        return Err(SimError::BadCorrelation(correlation));
    }
    if magnitude_db.is_nan() || magnitude_db == f64::INFINITY {
        return Err(SimError::BadMagnitude(magnitude_db));
    }
    if !(0.0..=1.0).contains(&smoothness) {
        return Err(SimError::BadSmoothness(smoothness));
    }
    let base_rms = base.distortion.rms();
    if base_rms == 0.0 {
        return Err(SimError::ZeroBaseProfile);
    }
    if magnitude_db == f64::NEG_INFINITY {
        return Ok(DeviceProfile {
            device_id: device_id.to_string(),
            distortion: ToneVector::zeros(config.n_tones()),
            magnitude_db,
        });
    }
    let base_unit = base
        .distortion
        .scale(Complex64::new(1.0 / base_rms, 0.0));
    let mut rng = derive_rng(master_seed, &["profile", device_id]);
    let own = profile_shape(config.n_tones(), &mut rng, smoothness);
    let own_unit = own.scale(Complex64::new(1.0 / own.rms(), 0.0));
    let blended = base_unit
        .scale(Complex64::new(correlation, 0.0))
        .add(&own_unit.scale(Complex64::new((1.0 - correlation * correlation).sqrt(), 0.0)));
    Ok(DeviceProfile {
        device_id: device_id.to_string(),
        distortion: scale_to_magnitude(&blended, magnitude_db),
        magnitude_db,
    })
}

/// Pulse shape producing the leakage of a fractional-delay path across
/// neighboring sample taps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Pulse {
    /// Ideal band-limited interpolation; tails decay like 1/x.
    Sinc,
    /// Raised cosine with the given rolloff in [0, 1]; tails decay like
    /// 1/x³, so far-tap leakage is orders of magnitude below sinc.
    RaisedCosine { rolloff: f64 },
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        return 1.0;
    }
    // Exact zeros at nonzero integers, so integer-delay channels have
    // exactly one tap instead of a dusting of 1e-16 residues.
    if x == x.round() {
        return 0.0;
    }
    (PI * x).sin() / (PI * x)
}

impl Pulse {
    fn validate(&self) -> Result<(), SimError> {
        match *self {
            Pulse::Sinc => Ok(()),
            Pulse::RaisedCosine { rolloff } => {
                if (0.0..=1.0).contains(&rolloff) {
                    Ok(())
                } else {
                    Err(SimError::BadRolloff(rolloff))
                }
            }
        }
    }

    /// Pulse amplitude at a (possibly fractional) tap offset.
    pub fn value(&self, x: f64) -> f64 {
        match *self {
            Pulse::Sinc => sinc(x),
            Pulse::RaisedCosine { rolloff } => {
                let u = 2.0 * rolloff * x;
                let denom = 1.0 - u * u;
                if denom.abs() < 1e-8 {
                    // Removable singularity at |x| = 1/(2·rolloff).
                    sinc(x) * PI / 4.0
                } else {
                    sinc(x) * (PI * rolloff * x).cos() / denom
                }
            }
        }
    }
}

impl FromStr for Pulse {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, SimError> {
        if s == "sinc" {
            return Ok(Pulse::Sinc);
        }
        if let Some(rest) = s.strip_prefix("raised-cosine") {
            let rolloff = match rest.strip_prefix(':') {
                None if rest.is_empty() => 0.5,
                Some(v) => v
                    .parse::<f64>()
                    .map_err(|_| SimError::UnknownPulse(s.to_string()))?,
                _ => return Err(SimError::UnknownPulse(s.to_string())),
            };
            let pulse = Pulse::RaisedCosine { rolloff };
            pulse.validate()?;
            return Ok(pulse);
        }
        Err(SimError::UnknownPulse(s.to_string()))
    }
}

impl fmt::Display for Pulse {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Pulse::Sinc => write!(f, "sinc"),
            Pulse::RaisedCosine { rolloff } => write!(f, "raised-cosine:{rolloff}"),
        }
    }
}

/// One concrete wireless channel: a time-domain tap vector (strongest tap
/// rotated to index 0, as after receiver packet synchronization) and its
/// frequency response on the observed tones.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelRealization {
    /// Tap amplitudes, length `dft_len`.
    pub taps: Vec<Complex64>,
    /// Frequency response per observed tone, map order.
    pub freq: ToneVector,
    /// Fractional delay of the path in samples.
    pub delay_frac: f64,
    /// Complex path amplitude as seen in the frequency response.
    pub gain: Complex64,
}

/// Frequency response on the observed tones of an arbitrary tap vector.
fn taps_to_freq(config: &SignalConfig, taps: &[Complex64]) -> ToneVector {
    let n = config.dft_len();
    let scale = 1.0 / (n as f64).sqrt();
    ToneVector::from_fn(config.n_tones(), |t| {
        let k = config.subcarriers()[t];
        let mut acc = Complex64::new(0.0, 0.0);
        for (l, &tap) in taps.iter().enumerate() {
            if tap == Complex64::new(0.0, 0.0) {
                continue;
            }
            let phase = -2.0 * PI * ((k * l) % n) as f64 / n as f64;
            acc += tap * Complex64::from_polar(1.0, phase);
        }
        acc * scale
    })
}

/// Synthesizes a single-path channel with pulse-shaping leakage.
///
/// The path sits at `delay_frac` samples; the nearest integer tap is
/// rotated to index 0. With `truncated` the pulse is cut beyond
/// `leak_halfwidth` samples from the path so the tap support lies exactly
/// inside the config's leak window; without it the full tail wraps around
/// the circle and a small out-of-window residue remains.
///
/// `gain` is the path amplitude in the frequency response: taps are scaled
/// by `gain · √N`, so a unit-gain untruncated sinc path has near-unit
/// magnitude on every tone.
pub fn single_path_channel(
    config: &SignalConfig,
    delay_frac: f64,
    gain: Complex64,
    pulse: Pulse,
    truncated: bool,
) -> Result<ChannelRealization, SimError> {
    if !(0.0..1.0).contains(&delay_frac) {
        return Err(SimError::BadDelayFrac(delay_frac));
    }
    if gain == Complex64::new(0.0, 0.0) || !gain.re.is_finite() || !gain.im.is_finite() {
        return Err(SimError::BadGain);
    }
    pulse.validate()?;
    let n = config.dft_len();
    let half = config.leak_halfwidth() as i64;
    // The tap nearest the path becomes index 0 after synchronization.
    let center = if delay_frac <= 0.5 { 0i64 } else { 1i64 };
    let scale = gain * (n as f64).sqrt();
    let mut taps = vec![Complex64::new(0.0, 0.0); n];
    let offsets: Box<dyn Iterator<Item = i64>> = if truncated {
        Box::new(-half..=half)
    } else {
        Box::new(-(n as i64) / 2..(n as i64) / 2)
    };
    for j in offsets {
        let x = (j + center) as f64 - delay_frac;
        if truncated && x.abs() > half as f64 {
            continue;
        }
        let amp = pulse.value(x);
        if amp == 0.0 {
            continue;
        }
        let idx = j.rem_euclid(n as i64) as usize;
        taps[idx] = scale * amp;
    }
    let freq = taps_to_freq(config, &taps);
    Ok(ChannelRealization {
        taps,
        freq,
        delay_frac,
        gain,
    })
}

impl ChannelRealization {
    /// An ideal single-tap channel: frequency response exactly `gain` on
    /// every tone.
    pub fn flat(config: &SignalConfig, gain: Complex64) -> Result<Self, SimError> {
        if gain == Complex64::new(0.0, 0.0) || !gain.re.is_finite() || !gain.im.is_finite() {
            return Err(SimError::BadGain);
        }
        let n = config.dft_len();
        let mut taps = vec![Complex64::new(0.0, 0.0); n];
        taps[0] = gain * (n as f64).sqrt();
        let freq = taps_to_freq(config, &taps);
        Ok(ChannelRealization {
            taps,
            freq,
            delay_frac: 0.0,
            gain,
        })
    }

    /// Builds a realization from explicit taps (for tests and custom
    /// geometries). The frequency response is derived from the taps.
    pub fn from_taps(config: &SignalConfig, taps: Vec<Complex64>) -> Result<Self, SimError> {
        if taps.len() != config.dft_len() {
            return Err(SimError::TapCountMismatch {
                expected: config.dft_len(),
                got: taps.len(),
            });
        }
        let freq = taps_to_freq(config, &taps);
        Ok(ChannelRealization {
            taps,
            freq,
            delay_frac: 0.0,
            gain: Complex64::new(1.0, 0.0),
        })
    }

    /// Fraction of tap energy outside the config's leak window. Exactly
    /// zero for truncated channels, whose outside taps are never written.
    pub fn out_of_window_energy(&self, config: &SignalConfig) -> f64 {
        let total: f64 = self.taps.iter().map(|t| t.norm_sqr()).sum();
        if total == 0.0 {
            return 0.0;
        }
        let mut inside = vec![false; self.taps.len()];
        for &l in config.tap_set() {
            inside[l] = true;
        }
        let outside: f64 = self
            .taps
            .iter()
            .zip(&inside)
            .filter(|(_, &keep)| !keep)
            .map(|(t, _)| t.norm_sqr())
            .sum();
        outside / total
    }
}

/// Draws a random single-path channel: delay uniform in [0, 1), unit-
/// magnitude gain with uniform phase.
pub fn draw_channel(
    config: &SignalConfig,
    rng: &mut ChaCha8Rng,
    pulse: Pulse,
    truncated: bool,
) -> Result<ChannelRealization, SimError> {
    let delay_frac = rng.gen_range(0.0..1.0);
    let phase = rng.gen_range(0.0..2.0 * PI);
    single_path_channel(
        config,
        delay_frac,
        Complex64::from_polar(1.0, phase),
        pulse,
        truncated,
    )
}

/// Additive complex white Gaussian noise of per-tone variance `sigma²`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseModel {
    sigma: f64,
}

impl NoiseModel {
    pub fn new(sigma: f64) -> Result<Self, SimError> {
        if !sigma.is_finite() || sigma < 0.0 {
            return Err(SimError::BadSigma(sigma));
        }
        Ok(NoiseModel { sigma })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// One complex noise sample with `E|z|² = sigma²`. Draws two normals
    /// even when sigma is 0 so noisy and noiseless runs consume identical
    /// RNG streams.
    pub fn draw(&self, rng: &mut ChaCha8Rng) -> Complex64 {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        Complex64::new(re, im) * (self.sigma * std::f64::consts::FRAC_1_SQRT_2)
    }
}

/// One received CSI estimate: what the receiver reports for a single frame
/// on a single receive chain.
#[derive(Clone, Debug, PartialEq)]
pub struct CsiMeasurement {
    pub device_id: String,
    pub rx_chain: u8,
    /// Frame sequence number within the session, shared by all chains.
    pub seq_no: u64,
    pub timestamp_us: u64,
    /// CSI per tone, map order.
    pub csi: ToneVector,
}

/// Builds one measurement from explicit ingredients:
/// `csi_k = h_k · (1 + f_k) + z_k`.
pub fn synthesize_measurement(
    config: &SignalConfig,
    profile: &DeviceProfile,
    channel: &ChannelRealization,
    noise: &NoiseModel,
    rng: &mut ChaCha8Rng,
    rx_chain: u8,
    seq_no: u64,
    timestamp_us: u64,
) -> CsiMeasurement {
    assert_eq!(profile.distortion.len(), config.n_tones());
    assert_eq!(channel.freq.len(), config.n_tones());
    let csi = ToneVector::from_fn(config.n_tones(), |k| {
        channel.freq[k] * (Complex64::new(1.0, 0.0) + profile.distortion[k]) + noise.draw(rng)
    });
    CsiMeasurement {
        device_id: profile.device_id.clone(),
        rx_chain,
        seq_no,
        timestamp_us,
        csi,
    }
}

/// How a session picks its per-chain channels.
#[derive(Clone, Debug)]
pub enum ChannelMode {
    /// Independent random single-path channel per chain.
    RandomSinglePath,
    /// The same ideal flat channel on every chain.
    Flat { gain: Complex64 },
    /// Explicit realizations, one per chain.
    Fixed(Vec<ChannelRealization>),
}

/// Parameters of one measurement session.
#[derive(Clone, Debug)]
pub struct SessionParams {
    pub n_packets: usize,
    pub n_rx_chains: usize,
    pub packet_interval_us: u64,
    pub noise_sigma: f64,
    pub channel: ChannelMode,
    pub pulse: Pulse,
    /// Truncate pulse tails to the leak window (keeps the channel exactly
    /// inside the modeled tap span).
    pub truncated: bool,
    /// RMS of a per-chain additive perturbation of the device distortion,
    /// modeling small receive-chain differences. Stable across sessions.
    pub chain_perturb_rms: f64,
}

impl Default for SessionParams {
    fn default() -> Self {
        SessionParams {
            n_packets: 1000,
            n_rx_chains: 2,
            packet_interval_us: 50,
            noise_sigma: 0.1,
            channel: ChannelMode::RandomSinglePath,
            pulse: Pulse::Sinc,
            truncated: true,
            chain_perturb_rms: 0.0,
        }
    }
}

struct ChainState {
    rx_chain: u8,
    /// Precomputed noiseless CSI `h · (1 + f_chain)` per tone.
    base: Vec<Complex64>,
    noise_rng: ChaCha8Rng,
}

/// A deterministic stream of CSI measurements for one device in one
/// environment.
///
/// Channels and noise are derived from `(master_seed, device, session
/// label, chain)`, so two sessions with different labels see independent
/// channels (a device measured at another time and place), while re-running
/// the same label reproduces the stream exactly. Iterating a `Session`
/// yields packets in time order with all chains per packet
/// (packet-major); [`Session::into_chain_streams`] yields the identical
/// measurements grouped by chain (chain-major), which is the order trace
/// files store.
pub struct Session {
    device_id: String,
    noise: NoiseModel,
    n_packets: usize,
    packet_interval_us: u64,
    chains: Vec<ChainState>,
    channels: Vec<ChannelRealization>,
    packet: usize,
    chain_cursor: usize,
}

impl Session {
    pub fn new(
        config: &SignalConfig,
        profile: &DeviceProfile,
        params: &SessionParams,
        master_seed: u64,
        session_label: &str,
    ) -> Result<Self, SimError> {
        if params.n_packets == 0 {
            return Err(SimError::NoPackets);
        }
        if params.n_rx_chains == 0 || params.n_rx_chains > 256 {
            return Err(SimError::BadChainCount(params.n_rx_chains));
        }
        if !params.chain_perturb_rms.is_finite() || params.chain_perturb_rms < 0.0 {
            return Err(SimError::BadPerturbation(params.chain_perturb_rms));
        }
        let noise = NoiseModel::new(params.noise_sigma)?;
        if let ChannelMode::Fixed(list) = &params.channel {
            if list.len() != params.n_rx_chains {
                return Err(SimError::ChannelCountMismatch {
                    expected: params.n_rx_chains,
                    got: list.len(),
                });
            }
        }
        let device = &profile.device_id;
        let mut chains = Vec::with_capacity(params.n_rx_chains);
        let mut channels = Vec::with_capacity(params.n_rx_chains);
        for chain in 0..params.n_rx_chains {
            let chain_tag = chain.to_string();
            let channel = match &params.channel {
                ChannelMode::RandomSinglePath => {
                    let mut rng =
                        derive_rng(master_seed, &["channel", device, session_label, &chain_tag]);
                    draw_channel(config, &mut rng, params.pulse, params.truncated)?
                }
                ChannelMode::Flat { gain } => ChannelRealization::flat(config, *gain)?,
                ChannelMode::Fixed(list) => list[chain].clone(),
            };
            // Receive-chain distortion differences belong to the hardware,
            // not the environment: no session label in the tag, so chain c
            // perturbs identically in every session.
            let distortion = if params.chain_perturb_rms > 0.0 {
                let mut rng = derive_rng(master_seed, &["chain-distortion", device, &chain_tag]);
                let pert = profile_shape(config.n_tones(), &mut rng, 0.0);
                let pert = pert.scale(Complex64::new(params.chain_perturb_rms / pert.rms(), 0.0));
                profile.distortion.add(&pert)
            } else {
                profile.distortion.clone()
            };
            let base: Vec<Complex64> = (0..config.n_tones())
                .map(|k| channel.freq[k] * (Complex64::new(1.0, 0.0) + distortion[k]))
                .collect();
            chains.push(ChainState {
                rx_chain: chain as u8,
                base,
                noise_rng: derive_rng(master_seed, &["noise", device, session_label, &chain_tag]),
            });
            channels.push(channel);
        }
        Ok(Session {
            device_id: device.clone(),
            noise,
            n_packets: params.n_packets,
            packet_interval_us: params.packet_interval_us,
            chains,
            channels,
            packet: 0,
            chain_cursor: 0,
        })
    }

    pub fn device_id(&self) -> &str {
        &self.device_id
    }

    pub fn n_packets(&self) -> usize {
        self.n_packets
    }

    pub fn n_rx_chains(&self) -> usize {
        self.chains.len()
    }

    /// The channel realizations this session drew, one per chain.
    pub fn channels(&self) -> &[ChannelRealization] {
        &self.channels
    }

    /// Total measurements the session will yield.
    pub fn len(&self) -> usize {
        self.n_packets * self.chains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn measure(&mut self, chain_idx: usize, packet: usize) -> CsiMeasurement {
        let noise = self.noise;
        let state = &mut self.chains[chain_idx];
        let csi: ToneVector = state
            .base
            .iter()
            .map(|&b| b + noise.draw(&mut state.noise_rng))
            .collect();
        CsiMeasurement {
            device_id: self.device_id.clone(),
            rx_chain: state.rx_chain,
            seq_no: packet as u64,
            timestamp_us: packet as u64 * self.packet_interval_us,
            csi,
        }
    }

    /// Splits the session into per-chain streams yielding the same
    /// measurements as the packet-major iterator, grouped by chain. Noise
    /// streams are already per-chain, so the values match bit for bit.
    pub fn into_chain_streams(self) -> Vec<ChainStream> {
        let device_id = self.device_id;
        let noise = self.noise;
        let n_packets = self.n_packets;
        let interval = self.packet_interval_us;
        self.chains
            .into_iter()
            .map(|state| ChainStream {
                device_id: device_id.clone(),
                noise,
                n_packets,
                packet_interval_us: interval,
                state,
                packet: 0,
            })
            .collect()
    }
}

impl Iterator for Session {
    type Item = CsiMeasurement;

    fn next(&mut self) -> Option<CsiMeasurement> {
        if self.packet >= self.n_packets {
            return None;
        }
        let m = self.measure(self.chain_cursor, self.packet);
        self.chain_cursor += 1;
        if self.chain_cursor == self.chains.len() {
            self.chain_cursor = 0;
            self.packet += 1;
        }
        Some(m)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let remaining = (self.n_packets - self.packet) * self.chains.len()
            - self.chain_cursor;
        (remaining, Some(remaining))
    }
}

/// Measurements of a single receive chain, in packet order.
pub struct ChainStream {
    device_id: String,
    noise: NoiseModel,
    n_packets: usize,
    packet_interval_us: u64,
    state: ChainState,
    packet: usize,
}

impl ChainStream {
    pub fn rx_chain(&self) -> u8 {
        self.state.rx_chain
    }
}

impl Iterator for ChainStream {
    type Item = CsiMeasurement;

    fn next(&mut self) -> Option<CsiMeasurement> {
        if self.packet >= self.n_packets {
            return None;
        }
        let csi: ToneVector = self
            .state
            .base
            .iter()
            .map(|&b| b + self.noise.draw(&mut self.state.noise_rng))
            .collect();
        let m = CsiMeasurement {
            device_id: self.device_id.clone(),
            rx_chain: self.state.rx_chain,
            seq_no: self.packet as u64,
            timestamp_us: self.packet as u64 * self.packet_interval_us,
            csi,
        };
        self.packet += 1;
        Some(m)
    }
}
