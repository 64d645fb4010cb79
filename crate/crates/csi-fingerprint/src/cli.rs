//! Command-line surface: simulation, extraction, enrollment,
//! authentication, and evaluation as composable subcommands.
//!
//! Subcommands exchange data through the two file formats in [`crate::io`]:
//! binary measurement traces and JSON fingerprint libraries.  A typical
//! pipeline:
//!
//! ```text
//! csi-fingerprint simulate --devices 11 --packets 60000 --out-dir run/
//! csi-fingerprint extract --trace run/trace_a.bin --n-csi 50 --out run/a.json
//! csi-fingerprint extract --trace run/trace_b.bin --n-csi 50 --out run/b.json
//! csi-fingerprint enroll --fingerprints run/a.json --out run/library.json
//! csi-fingerprint auth --library run/library.json --probes run/b.json \
//!     --claim dev1 --device dev1
//! ```
//!
//! Every stage is seeded from the global `--seed`, so a pipeline run
//! through these subcommands produces bit-identical files to the same
//! sequence driven in process through the library API.
//!
//! Exit status: 0 on success (for `auth`, every probe accepted), 1 on a
//! usage error (unknown flags, out-of-range values), 2 on a data error
//! (unreadable or mismatched files, degenerate datasets) or a rejected
//! probe.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::eval::{
    roc_auc, roc_curve, run_rotation, stability_report, threshold_at_far, EvalError,
    EvalScenario, RotationSummary,
};
use crate::extract::{ChainCombining, ExtractError, Fingerprint, StreamExtractor};
use crate::harness::{
    build_profiles, device_ids, library_calibration_scores, ExperimentParams, HarnessError,
    LIBRARY_SESSION, PROBE_SESSION,
};
use crate::io::library::{read_library, write_library, LibraryError, LibraryFile};
use crate::io::trace::{read_trace, write_trace, TraceError};
use crate::matcher::{
    authenticate, FeatureView, FingerprintLibrary, KRule, MatchError, MatcherParams,
};
use crate::signal::SignalConfig;
use crate::sim::{Pulse, Session, SimError};

/// Anything that stops a subcommand, tagged with how it maps to an exit
/// status: usage problems exit 1, data problems exit 2.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Library(#[from] LibraryError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Extract(#[from] ExtractError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error(transparent)]
    Matcher(#[from] MatchError),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            _ => 2,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OutputFormat {
    /// Aligned plain-text columns.
    Table,
    /// Comma-separated values with a header row.
    Csv,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PulseArg {
    /// Ideal band-limited interpolation (slow 1/x tails).
    Sinc,
    /// Raised cosine with `--rolloff` (fast 1/x³ tails).
    RaisedCosine,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum CombiningArg {
    /// Extract per chain, then average the per-chain fingerprints.
    PerChain,
    /// Average chain means first, then extract once.
    Pooled,
}

impl From<CombiningArg> for ChainCombining {
    fn from(arg: CombiningArg) -> ChainCombining {
        match arg {
            CombiningArg::PerChain => ChainCombining::PerChain,
            CombiningArg::Pooled => ChainCombining::Pooled,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum KRuleArg {
    /// K = ⌊√S⌋ per identity, tracking library size.
    SqrtS,
    /// Use `--k` verbatim.
    Explicit,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FeatureArg {
    /// Real and imaginary parts interleaved.
    Complex,
    /// Per-tone magnitudes.
    Amplitude,
    /// Per-tone phases.
    Phase,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum StyleArg {
    /// Per-device threshold from the evaluated scores themselves (best
    /// achievable operating point; standard for reporting detection-rate
    /// grids).
    Oracle,
    /// Per-device threshold from library leave-one-out scores only; the
    /// measured false-alarm rate may exceed the cap.
    Calibrated,
    /// Both of the above.
    Both,
}

/// Matcher flags shared by every subcommand that scores fingerprints.
#[derive(clap::Args)]
struct MatcherArgs {
    /// Neighbor-count rule.
    #[arg(long, value_enum, default_value_t = KRuleArg::SqrtS)]
    k_rule: KRuleArg,
    /// Neighbor count when --k-rule is explicit.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    k: u64,
    /// Distance feature view.
    #[arg(long, value_enum, default_value_t = FeatureArg::Complex)]
    feature: FeatureArg,
}

impl MatcherArgs {
    /// Matcher parameters with the given decision threshold (use any
    /// positive placeholder where only distances are computed).
    fn params(&self, threshold: f64) -> MatcherParams {
        MatcherParams {
            k_neighbors: self.k as usize,
            threshold,
            k_rule: match self.k_rule {
                KRuleArg::SqrtS => KRule::SqrtS,
                KRuleArg::Explicit => KRule::Explicit,
            },
            feature: match self.feature {
                FeatureArg::Complex => FeatureView::Complex,
                FeatureArg::Amplitude => FeatureView::Amplitude,
                FeatureArg::Phase => FeatureView::Phase,
            },
        }
    }
}

#[derive(Parser)]
#[command(
    name = "csi-fingerprint",
    version,
    about = "Simulate, extract, and evaluate per-device CSI fingerprints",
    propagate_version = true
)]
struct Cli {
    /// Master seed for every random draw.
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,
    /// Tone map name.
    #[arg(long, global = true, default_value = "ht20")]
    config: String,
    /// DFT length the tone map lives in.
    #[arg(long, global = true, default_value_t = 64)]
    dft_len: usize,
    /// Leakage half-width of the modeled tap window.
    #[arg(long, global = true, default_value_t = 8)]
    leak_halfwidth: usize,
    /// Report rendering.
    #[arg(long, global = true, value_enum, default_value_t = OutputFormat::Table)]
    format: OutputFormat,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate per-device measurement sessions into binary traces.
    Simulate(SimulateArgs),
    /// Extract fingerprints from a trace into a fingerprint file.
    Extract(ExtractArgs),
    /// Calibrate a decision threshold and write an authentication library.
    Enroll(EnrollArgs),
    /// Authenticate probe fingerprints against an enrolled library.
    Auth(AuthArgs),
    /// Run the device-rotation protocol over a batch-size grid.
    Evaluate(EvaluateArgs),
    /// Compute a pooled ROC curve at one batch size.
    Roc(RocArgs),
    /// Report per-tone fingerprint variance per device.
    Stability(StabilityArgs),
}

#[derive(clap::Args)]
struct SimulateArgs {
    /// Number of devices (dev1, dev2, …).
    #[arg(long, default_value_t = 11, value_parser = clap::value_parser!(u64).range(1..))]
    devices: u64,
    /// Packets per device per session.
    #[arg(long, default_value_t = 60_000, value_parser = clap::value_parser!(u64).range(1..))]
    packets: u64,
    /// Receive chains per device.
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u64).range(1..=255))]
    chains: u64,
    /// Packet spacing in microseconds.
    #[arg(long, default_value_t = 50)]
    interval_us: u64,
    /// Device distortion RMS in dB.
    #[arg(long, default_value_t = -25.0, allow_negative_numbers = true)]
    magnitude_db: f64,
    /// Per-tone complex noise σ.
    #[arg(long, default_value_t = 0.1)]
    sigma: f64,
    /// Spectral smoothness of distortion profiles in [0, 1].
    #[arg(long, default_value_t = 0.9)]
    smoothness: f64,
    /// RMS of stable per-chain distortion perturbations.
    #[arg(long, default_value_t = 0.0)]
    chain_perturb_rms: f64,
    /// Pulse shape behind each channel path.
    #[arg(long, value_enum, default_value_t = PulseArg::Sinc)]
    pulse: PulseArg,
    /// Raised-cosine rolloff (used with --pulse raised-cosine).
    #[arg(long, default_value_t = 0.25)]
    rolloff: f64,
    /// Keep pulse tails beyond the modeled tap window instead of
    /// truncating them.
    #[arg(long)]
    untruncated: bool,
    /// Draw devices as correlated pairs with this coefficient
    /// (same-production-run model).
    #[arg(long)]
    correlation: Option<f64>,
    /// Session labels; one trace file per label.
    #[arg(long, value_delimiter = ',', default_values_t = [
        LIBRARY_SESSION.to_string(), PROBE_SESSION.to_string()
    ])]
    sessions: Vec<String>,
    /// Directory receiving trace_<label>.bin files.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(clap::Args)]
struct ExtractArgs {
    /// Trace file to read.
    #[arg(long)]
    trace: PathBuf,
    /// Measurements averaged per fingerprint; trailing measurements that
    /// do not fill a batch on every chain are dropped.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    n_csi: u64,
    /// How receive chains combine into one fingerprint.
    #[arg(long, value_enum, default_value_t = CombiningArg::PerChain)]
    combining: CombiningArg,
    /// Output fingerprint file (JSON).
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct EnrollArgs {
    /// Extracted fingerprint file to enroll.
    #[arg(long)]
    fingerprints: PathBuf,
    /// Decision threshold; omitted, it is calibrated from leave-one-out
    /// scores pooled over all identities at --far-cap.
    #[arg(long)]
    threshold: Option<f64>,
    /// False-alarm-rate cap for threshold calibration.
    #[arg(long, default_value_t = 0.0)]
    far_cap: f64,
    #[command(flatten)]
    matcher: MatcherArgs,
    /// Output library file (JSON).
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct AuthArgs {
    /// Enrolled library file.
    #[arg(long)]
    library: PathBuf,
    /// Fingerprint file holding the probes.
    #[arg(long)]
    probes: PathBuf,
    /// Claimed identity to authenticate against.
    #[arg(long)]
    claim: String,
    /// Only authenticate probes extracted from this device (default: every
    /// probe in the file).
    #[arg(long)]
    device: Option<String>,
}

#[derive(clap::Args)]
struct EvaluateArgs {
    /// Enrollment-session trace.
    #[arg(long)]
    trace_a: PathBuf,
    /// Probe-session trace.
    #[arg(long)]
    trace_b: PathBuf,
    /// Batch sizes to evaluate.
    #[arg(long, value_delimiter = ',', default_values_t = [10u64, 20, 50, 100, 200],
          value_parser = clap::value_parser!(u64).range(1..))]
    n_csi: Vec<u64>,
    /// False-alarm-rate cap defining each operating point.
    #[arg(long, default_value_t = 0.0)]
    far_cap: f64,
    /// How thresholds are chosen.
    #[arg(long, value_enum, default_value_t = StyleArg::Oracle)]
    style: StyleArg,
    /// How receive chains combine into one fingerprint.
    #[arg(long, value_enum, default_value_t = CombiningArg::PerChain)]
    combining: CombiningArg,
    #[command(flatten)]
    matcher: MatcherArgs,
    /// Also print one row per defending device.
    #[arg(long)]
    per_device: bool,
}

#[derive(clap::Args)]
struct RocArgs {
    /// Enrollment-session trace.
    #[arg(long)]
    trace_a: PathBuf,
    /// Probe-session trace.
    #[arg(long)]
    trace_b: PathBuf,
    /// Batch size to evaluate at.
    #[arg(long, default_value_t = 50, value_parser = clap::value_parser!(u64).range(1..))]
    n_csi: u64,
    /// How receive chains combine into one fingerprint.
    #[arg(long, value_enum, default_value_t = CombiningArg::PerChain)]
    combining: CombiningArg,
    #[command(flatten)]
    matcher: MatcherArgs,
    /// Plot-data file: one "far adr" pair per line.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct StabilityArgs {
    /// Trace file to read.
    #[arg(long)]
    trace: PathBuf,
    /// Measurements averaged per fingerprint.
    #[arg(long, default_value_t = 50, value_parser = clap::value_parser!(u64).range(1..))]
    n_csi: u64,
    /// How receive chains combine into one fingerprint.
    #[arg(long, value_enum, default_value_t = CombiningArg::PerChain)]
    combining: CombiningArg,
    /// Plot-data file: one "tone_offset mean_complex_variance" pair per
    /// line, averaged over devices.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parses `argv` and runs the selected subcommand, returning the process
/// exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(err) => {
            // Help and version requests are "errors" to clap but success
            // to the shell.
            let code = if err.use_stderr() { 1 } else { 0 };
            let _ = err.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            err.exit_code()
        }
    }
}

fn dispatch(cli: &Cli) -> Result<i32, CliError> {
    let config = SignalConfig::build(cli.dft_len, &cli.config, cli.leak_halfwidth)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    match &cli.command {
        Command::Simulate(args) => simulate(cli, &config, args),
        Command::Extract(args) => extract(cli, &config, args),
        Command::Enroll(args) => enroll(cli, &config, args),
        Command::Auth(args) => auth(cli, &config, args),
        Command::Evaluate(args) => evaluate(cli, &config, args),
        Command::Roc(args) => roc(cli, &config, args),
        Command::Stability(args) => stability(cli, &config, args),
    }
}

/// Renders one report: aligned columns or CSV, ending in a newline.
fn render(format: OutputFormat, headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut out = String::new();
    match format {
        OutputFormat::Csv => {
            out.push_str(&headers.join(","));
            out.push('\n');
            for row in rows {
                out.push_str(&row.join(","));
                out.push('\n');
            }
        }
        OutputFormat::Table => {
            let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
            for row in rows {
                for (w, cell) in widths.iter_mut().zip(row) {
                    *w = (*w).max(cell.len());
                }
            }
            let mut line = |cells: Vec<&str>| {
                let joined = cells
                    .iter()
                    .zip(&widths)
                    .map(|(c, w)| format!("{c:<w$}"))
                    .collect::<Vec<_>>()
                    .join("  ");
                out.push_str(joined.trim_end());
                out.push('\n');
            };
            line(headers.to_vec());
            for row in rows {
                line(row.iter().map(String::as_str).collect());
            }
        }
    }
    out
}

fn print_report(format: OutputFormat, headers: &[&str], rows: &[Vec<String>]) {
    print!("{}", render(format, headers, rows));
}

fn rate(v: f64) -> String {
    format!("{v:.4}")
}

fn sci(v: f64) -> String {
    format!("{v:.6e}")
}

fn experiment_params(cli: &Cli, args: &SimulateArgs) -> ExperimentParams {
    ExperimentParams {
        n_devices: args.devices as usize,
        n_packets: args.packets as usize,
        n_rx_chains: args.chains as usize,
        packet_interval_us: args.interval_us,
        magnitude_db: args.magnitude_db,
        smoothness: args.smoothness,
        noise_sigma: args.sigma,
        chain_perturb_rms: args.chain_perturb_rms,
        pulse: match args.pulse {
            PulseArg::Sinc => Pulse::Sinc,
            PulseArg::RaisedCosine => Pulse::RaisedCosine {
                rolloff: args.rolloff,
            },
        },
        truncated: !args.untruncated,
        combining: ChainCombining::PerChain,
        pair_correlation: args.correlation,
        master_seed: cli.seed,
    }
}

fn simulate(cli: &Cli, config: &SignalConfig, args: &SimulateArgs) -> Result<i32, CliError> {
    for label in &args.sessions {
        let ok = !label.is_empty()
            && label
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
        if !ok {
            return Err(CliError::Usage(format!(
                "session label {label:?} must be non-empty and use only [A-Za-z0-9_-]"
            )));
        }
    }
    let params = experiment_params(cli, args);
    let profiles = build_profiles(config, &params)?;
    let ids = device_ids(params.n_devices);
    fs::create_dir_all(&args.out_dir)?;

    let mut rows = Vec::new();
    for label in &args.sessions {
        let path = args.out_dir.join(format!("trace_{label}.bin"));
        let session_params = params.session_params();
        let mut streams = Vec::new();
        for profile in &profiles {
            let session =
                Session::new(config, profile, &session_params, params.master_seed, label)?;
            streams.extend(session.into_chain_streams());
        }
        let records = write_trace(&path, config, &ids, streams.into_iter().flatten())?;
        rows.push(vec![
            label.clone(),
            path.display().to_string(),
            ids.len().to_string(),
            records.to_string(),
        ]);
    }
    print_report(cli.format, &["session", "path", "devices", "records"], &rows);
    Ok(0)
}

/// Reads a trace and turns it into per-device fingerprints at one batch
/// size, returning the header's device order alongside.
fn dataset_from_trace(
    config: &SignalConfig,
    path: &Path,
    n_csi: usize,
    combining: ChainCombining,
) -> Result<(Vec<String>, BTreeMap<String, Vec<Fingerprint>>), CliError> {
    let mut reader = read_trace(path)?;
    reader.header().check_config(config)?;
    let devices = reader.header().devices.clone();
    let mut extractor = StreamExtractor::new(config, n_csi, combining)?;
    for record in reader.by_ref() {
        extractor.push(&record?)?;
    }
    let mut dataset = extractor.finish()?;
    // A device whose packets never filled one batch still exists; keep an
    // empty entry so downstream errors name it rather than skip it.
    for device in &devices {
        dataset.entry(device.clone()).or_default();
    }
    Ok((devices, dataset))
}

/// Fingerprint files reuse the library format; before enrollment the
/// matcher block is this placeholder.
fn placeholder_matcher() -> MatcherParams {
    MatcherParams::sqrt_s(1.0)
}

fn extract(cli: &Cli, config: &SignalConfig, args: &ExtractArgs) -> Result<i32, CliError> {
    let (devices, dataset) =
        dataset_from_trace(config, &args.trace, args.n_csi as usize, args.combining.into())?;
    let mut library = FingerprintLibrary::for_config(config);
    for (device, fps) in &dataset {
        if !fps.is_empty() {
            library = library.enroll(device, fps, false)?;
        }
    }
    if library.is_empty() {
        return Err(CliError::Data(format!(
            "no complete batches of {} measurements in {}",
            args.n_csi,
            args.trace.display()
        )));
    }
    write_library(
        &args.out,
        &LibraryFile {
            library,
            matcher: placeholder_matcher(),
        },
    )?;

    let rows: Vec<Vec<String>> = devices
        .iter()
        .map(|d| {
            vec![
                d.clone(),
                dataset.get(d).map_or(0, Vec::len).to_string(),
                args.out.display().to_string(),
            ]
        })
        .collect();
    print_report(cli.format, &["device", "fingerprints", "path"], &rows);
    Ok(0)
}

fn enroll(cli: &Cli, config: &SignalConfig, args: &EnrollArgs) -> Result<i32, CliError> {
    let extracted = read_library(&args.fingerprints)?;
    extracted.check_config(config)?;
    let library = extracted.library;

    let mut params = args.matcher.params(args.threshold.unwrap_or(1.0));
    let mut calibration_far = f64::NAN;
    if args.threshold.is_none() {
        let dataset: BTreeMap<String, Vec<Fingerprint>> = library
            .identities()
            .map(|id| (id.to_string(), library.fingerprints(id).unwrap().to_vec()))
            .collect();
        let scores: Vec<f64> = library_calibration_scores(&dataset, &params)?
            .into_values()
            .flatten()
            .collect();
        let (threshold, far) = threshold_at_far(&scores, args.far_cap)?;
        if !threshold.is_finite() || threshold <= 0.0 {
            return Err(CliError::Data(format!(
                "calibrated threshold {threshold} is not positive; the library's \
                 leave-one-out distances are degenerate"
            )));
        }
        params.threshold = threshold;
        calibration_far = far;
    }

    let file = LibraryFile {
        library,
        matcher: params,
    };
    write_library(&args.out, &file)?;

    let mut rows: Vec<Vec<String>> = file
        .library
        .identities()
        .map(|id| vec![id.to_string(), file.library.enrolled_count(id).to_string()])
        .collect();
    rows.push(vec!["(threshold)".to_string(), sci(params.threshold)]);
    if args.threshold.is_none() {
        rows.push(vec!["(calibration_far)".to_string(), rate(calibration_far)]);
    }
    print_report(cli.format, &["identity", "value"], &rows);
    Ok(0)
}

fn auth(cli: &Cli, config: &SignalConfig, args: &AuthArgs) -> Result<i32, CliError> {
    let library_file = read_library(&args.library)?;
    library_file.check_config(config)?;
    let probe_file = read_library(&args.probes)?;
    probe_file.check_config(config)?;

    let sources: Vec<&str> = match &args.device {
        Some(device) => {
            if probe_file.library.fingerprints(device).is_none() {
                return Err(CliError::Data(format!(
                    "no probes from device {device:?} in {}",
                    args.probes.display()
                )));
            }
            vec![device.as_str()]
        }
        None => probe_file.library.identities().collect(),
    };

    let mut rows = Vec::new();
    let mut accepted = 0usize;
    let mut total = 0usize;
    for source in sources {
        let probes = probe_file
            .library
            .fingerprints(source)
            .expect("sources come from the probe file");
        for (i, probe) in probes.iter().enumerate() {
            let decision =
                authenticate(&library_file.library, &library_file.matcher, &args.claim, probe)?;
            total += 1;
            accepted += decision.accepted as usize;
            rows.push(vec![
                source.to_string(),
                i.to_string(),
                sci(decision.distance),
                sci(decision.threshold),
                if decision.accepted { "accept" } else { "reject" }.to_string(),
            ]);
        }
    }
    print_report(
        cli.format,
        &["probe_device", "probe", "distance", "threshold", "decision"],
        &rows,
    );
    println!("accepted {accepted}/{total} probes under claim {:?}", args.claim);
    Ok(if accepted == total { 0 } else { 2 })
}

/// Shared evaluation prologue: extract both sessions at one batch size and
/// check they describe the same device population.
fn rotation_inputs(
    config: &SignalConfig,
    trace_a: &Path,
    trace_b: &Path,
    n_csi: usize,
    combining: ChainCombining,
) -> Result<
    (
        Vec<String>,
        BTreeMap<String, Vec<Fingerprint>>,
        BTreeMap<String, Vec<Fingerprint>>,
    ),
    CliError,
> {
    let (devices_a, library) = dataset_from_trace(config, trace_a, n_csi, combining)?;
    let (devices_b, probes) = dataset_from_trace(config, trace_b, n_csi, combining)?;
    if devices_a != devices_b {
        return Err(CliError::Data(format!(
            "traces describe different device populations: {} has {:?}, {} has {:?}",
            trace_a.display(),
            devices_a,
            trace_b.display(),
            devices_b
        )));
    }
    Ok((devices_a, library, probes))
}

fn scenario(devices: Vec<String>, n_csi: usize, seed: u64) -> EvalScenario {
    EvalScenario {
        devices,
        legit_rotation: true,
        n_csi,
        library_source: LIBRARY_SESSION.to_string(),
        probe_source: PROBE_SESSION.to_string(),
        trials: 1,
        balance_seed: seed,
    }
}

fn evaluate(cli: &Cli, config: &SignalConfig, args: &EvaluateArgs) -> Result<i32, CliError> {
    let params = args.matcher.params(1.0);
    let mut grid_rows = Vec::new();
    let mut device_rows = Vec::new();
    for &n_csi in &args.n_csi {
        let n_csi = n_csi as usize;
        let (devices, library, probes) = rotation_inputs(
            config,
            &args.trace_a,
            &args.trace_b,
            n_csi,
            args.combining.into(),
        )?;
        let result = run_rotation(
            config,
            &scenario(devices, n_csi, cli.seed),
            &library,
            &probes,
            &params,
        )?;

        let mut summaries: Vec<(&str, RotationSummary)> = Vec::new();
        if matches!(args.style, StyleArg::Oracle | StyleArg::Both) {
            summaries.push(("oracle", result.summarize(args.far_cap)?));
        }
        if matches!(args.style, StyleArg::Calibrated | StyleArg::Both) {
            let calibration = library_calibration_scores(&library, &params)?;
            summaries.push((
                "calibrated",
                result.summarize_calibrated(&calibration, args.far_cap)?,
            ));
        }
        for (style, summary) in summaries {
            grid_rows.push(vec![
                style.to_string(),
                summary.n_csi.to_string(),
                rate(summary.far_cap),
                rate(summary.mean_far),
                rate(summary.mean_adr),
            ]);
            if args.per_device {
                for point in &summary.per_device {
                    device_rows.push(vec![
                        style.to_string(),
                        summary.n_csi.to_string(),
                        point.device.clone(),
                        sci(point.threshold),
                        rate(point.far),
                        rate(point.adr),
                    ]);
                }
            }
        }
    }
    print_report(
        cli.format,
        &["style", "n_csi", "far_cap", "mean_far", "mean_adr"],
        &grid_rows,
    );
    if args.per_device {
        println!();
        print_report(
            cli.format,
            &["style", "n_csi", "device", "threshold", "far", "adr"],
            &device_rows,
        );
    }
    Ok(0)
}

fn roc(cli: &Cli, config: &SignalConfig, args: &RocArgs) -> Result<i32, CliError> {
    let params = args.matcher.params(1.0);
    let n_csi = args.n_csi as usize;
    let (devices, library, probes) = rotation_inputs(
        config,
        &args.trace_a,
        &args.trace_b,
        n_csi,
        args.combining.into(),
    )?;
    let result = run_rotation(
        config,
        &scenario(devices, n_csi, cli.seed),
        &library,
        &probes,
        &params,
    )?;

    let mut legit = Vec::new();
    let mut attack = Vec::new();
    for device in &result.devices {
        legit.extend_from_slice(&device.legit_scores);
        attack.extend(device.pooled_attack_scores());
    }
    let curve = roc_curve(&legit, &attack)?;
    let auc = roc_auc(&curve);

    if let Some(path) = &args.out {
        let mut sink = io::BufWriter::new(fs::File::create(path)?);
        for point in &curve {
            writeln!(sink, "{:.9e} {:.9e}", point.far, point.adr)?;
        }
        sink.flush()?;
    }
    print_report(
        cli.format,
        &["n_csi", "points", "auc"],
        &[vec![n_csi.to_string(), curve.len().to_string(), rate(auc)]],
    );
    Ok(0)
}

fn stability(cli: &Cli, config: &SignalConfig, args: &StabilityArgs) -> Result<i32, CliError> {
    let (_, dataset) =
        dataset_from_trace(config, &args.trace, args.n_csi as usize, args.combining.into())?;
    let populated: BTreeMap<String, Vec<Fingerprint>> = dataset
        .into_iter()
        .filter(|(_, fps)| !fps.is_empty())
        .collect();
    let report = stability_report(config, &populated)?;

    if let Some(path) = &args.out {
        // Mean complex variance per tone across devices, offset-ascending.
        let mut by_offset: BTreeMap<i32, (f64, usize)> = BTreeMap::new();
        for row in &report {
            let slot = by_offset.entry(row.tone_offset).or_insert((0.0, 0));
            slot.0 += row.complex_variance;
            slot.1 += 1;
        }
        let mut sink = io::BufWriter::new(fs::File::create(path)?);
        for (offset, (sum, count)) in by_offset {
            writeln!(sink, "{offset} {:.9e}", sum / count as f64)?;
        }
        sink.flush()?;
    }

    let rows: Vec<Vec<String>> = report
        .iter()
        .map(|row| {
            vec![
                row.device.clone(),
                row.tone_offset.to_string(),
                sci(row.complex_variance),
                sci(row.amplitude_variance),
                sci(row.phase_variance),
            ]
        })
        .collect();
    print_report(
        cli.format,
        &[
            "device",
            "tone_offset",
            "complex_variance",
            "amplitude_variance",
            "phase_variance",
        ],
        &rows,
    );
    Ok(0)
}
