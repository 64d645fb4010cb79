//! Radiometric fingerprinting of commodity Wi-Fi devices from channel state
//! information (CSI).
//!
//! A transmitter's RF front end leaves a small device-specific distortion on
//! every emitted OFDM symbol, so the CSI estimated at the receiver carries
//! both the wireless channel and that distortion. Under strong line-of-sight
//! the channel occupies only a narrow set of time-domain taps; projecting the
//! averaged CSI onto that tap subspace recovers the channel alone, and
//! element-wise division then cancels it, leaving a channel-independent
//! device fingerprint. A KNN anomaly detector authenticates probe
//! fingerprints against per-identity libraries.
//!
//! The crate is organized as a pipeline:
//!
//! - [`signal`] — subcarrier maps, partial DFT matrices, and the tap-subspace
//!   projector shared by everything else.
//! - [`sim`] — device distortion profiles, single-path channels with
//!   pulse-shaping leakage, and SIMO measurement streams.
//! - [`extract`] — measurement averaging, least-squares channel estimation,
//!   and fingerprint extraction.
//! - [`matcher`] — fingerprint libraries and KNN authentication.
//! - [`eval`] — device-rotation evaluation, ADR/FAR operating points, ROC
//!   data, and fingerprint-stability reports.
//! - [`io`] — the binary CSI trace format, the JSON fingerprint-library
//!   format, and the command-line interface.

pub mod cli;
pub mod eval;
pub mod extract;
pub mod harness;
pub mod io;
pub mod matcher;
pub mod seeds;
pub mod signal;
pub mod sim;

pub use signal::{SignalConfig, ToneVector};
