//! JSON fingerprint-library files.
//!
//! A library file is a single JSON document carrying a format tag, a version
//! number, the signal-configuration digest, the matcher parameters, and every
//! enrolled fingerprint grouped by identity:
//!
//! ```json
//! {
//!   "format": "csi-fingerprint-library",
//!   "version": 1,
//!   "config_digest": "1f0c…16 hex digits…",
//!   "n_tones": 56,
//!   "matcher": { "k_neighbors": 1, "threshold": 2.5e-1, "k_rule": "sqrt_s",
//!                "feature": "complex" },
//!   "identities": {
//!     "dev1": [ { "n_csi": 50, "extracted_at": 0,
//!                 "values": [[re, im], …] }, … ]
//!   }
//! }
//! ```
//!
//! Every float is written in scientific notation with 17 significant digits
//! (`%.16e`), enough to reconstruct the exact `f64` bit pattern on read, so a
//! write/read cycle preserves authentication decisions bit for bit.  Readers
//! validate the format tag, version, digest syntax, tone-count consistency,
//! and value finiteness before handing anything to the matcher; any violation
//! is a typed [`LibraryError`], never a panic, which makes
//! [`read_library_slice`] safe to drive with untrusted bytes.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::extract::Fingerprint;
use crate::matcher::{FingerprintLibrary, MatchError, MatcherParams};
use crate::signal::{SignalConfig, ToneVector};

/// Value of the `format` field; anything else is rejected up front.
pub const LIBRARY_FORMAT_TAG: &str = "csi-fingerprint-library";

/// Library file version this build writes and understands.
pub const LIBRARY_VERSION: u32 = 1;

/// Upper bound on the advertised tone count, mirroring the trace reader's
/// limit; real tone maps are far smaller.
const MAX_TONES: usize = 4096;

/// Reasons a library file cannot be written or read back.
#[derive(Debug, thiserror::Error)]
pub enum LibraryError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("not a fingerprint library file (format tag {0:?})")]
    BadFormatTag(String),
    #[error("unsupported library version {0}")]
    UnsupportedVersion(u32),
    #[error("config digest {0:?} is not a 16-digit hex string")]
    BadDigest(String),
    #[error("config digest mismatch: file has {got:#018x}, expected {expected:#018x}")]
    DigestMismatch { expected: u64, got: u64 },
    #[error("implausible tone count {0}")]
    BadToneCount(usize),
    #[error("matcher threshold {0} is not positive and finite")]
    BadThreshold(f64),
    #[error("identity {identity:?} carries no fingerprints")]
    EmptyIdentity { identity: String },
    #[error("fingerprint under {identity:?} has {got} tones where the header promises {expected}")]
    LengthMismatch {
        identity: String,
        expected: usize,
        got: usize,
    },
    #[error("fingerprint under {identity:?} contains a non-finite value")]
    NonFinite { identity: String },
    #[error("fingerprint under {identity:?} claims an averaging depth of zero")]
    ZeroAveragingDepth { identity: String },
    #[error(transparent)]
    Matcher(#[from] MatchError),
}

/// An enrolled fingerprint library together with the matcher parameters it
/// was calibrated for — everything a verifier needs to authenticate probes.
#[derive(Clone, Debug)]
pub struct LibraryFile {
    pub library: FingerprintLibrary,
    pub matcher: MatcherParams,
}

impl LibraryFile {
    /// Checks that this library was built under `config`, comparing digests.
    pub fn check_config(&self, config: &SignalConfig) -> Result<(), LibraryError> {
        if self.library.config_digest() != config.digest() {
            return Err(LibraryError::DigestMismatch {
                expected: config.digest(),
                got: self.library.config_digest(),
            });
        }
        Ok(())
    }
}

/// On-disk shape of the whole document.
#[derive(Serialize, Deserialize)]
struct LibraryDoc {
    format: String,
    version: u32,
    config_digest: String,
    n_tones: usize,
    matcher: MatcherParams,
    identities: BTreeMap<String, Vec<FingerprintDoc>>,
}

/// On-disk shape of one fingerprint; `values` holds `[re, im]` pairs in map
/// order.
#[derive(Serialize, Deserialize)]
struct FingerprintDoc {
    n_csi: usize,
    extracted_at: u64,
    values: Vec<(f64, f64)>,
}

/// JSON formatter that prints every float with 17 significant digits, the
/// smallest count guaranteed to round-trip any `f64` exactly.
struct FullPrecisionFormatter;

impl serde_json::ser::Formatter for FullPrecisionFormatter {
    fn write_f64<W>(&mut self, writer: &mut W, value: f64) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        write!(writer, "{value:.16e}")
    }
}

/// Serializes `file` to JSON bytes (UTF-8, trailing newline).
fn to_json_bytes(file: &LibraryFile) -> Result<Vec<u8>, LibraryError> {
    if !file.matcher.threshold.is_finite() || file.matcher.threshold <= 0.0 {
        return Err(LibraryError::BadThreshold(file.matcher.threshold));
    }
    let mut identities = BTreeMap::new();
    for identity in file.library.identities() {
        let fps = file
            .library
            .fingerprints(identity)
            .expect("identity listed by the library it came from");
        let docs = fps
            .iter()
            .map(|fp| FingerprintDoc {
                n_csi: fp.n_csi,
                extracted_at: fp.extracted_at,
                values: fp.values.iter().map(|v| (v.re, v.im)).collect(),
            })
            .collect();
        identities.insert(identity.to_string(), docs);
    }
    let doc = LibraryDoc {
        format: LIBRARY_FORMAT_TAG.to_string(),
        version: LIBRARY_VERSION,
        config_digest: format!("{:016x}", file.library.config_digest()),
        n_tones: file.library.n_tones(),
        matcher: file.matcher,
        identities,
    };
    let mut bytes = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut bytes, FullPrecisionFormatter);
    doc.serialize(&mut ser)?;
    bytes.push(b'\n');
    Ok(bytes)
}

/// Writes `file` to `path` as a library JSON document.
pub fn write_library(path: &Path, file: &LibraryFile) -> Result<(), LibraryError> {
    let bytes = to_json_bytes(file)?;
    let mut sink = BufWriter::new(File::create(path)?);
    sink.write_all(&bytes)?;
    sink.flush()?;
    Ok(())
}

/// Parses and validates a library document from raw bytes.
///
/// This is the complete untrusted-input path: arbitrary bytes produce either
/// a fully validated [`LibraryFile`] or a [`LibraryError`].
pub fn read_library_slice(bytes: &[u8]) -> Result<LibraryFile, LibraryError> {
    let doc: LibraryDoc = serde_json::from_slice(bytes)?;
    if doc.format != LIBRARY_FORMAT_TAG {
        return Err(LibraryError::BadFormatTag(doc.format));
    }
    if doc.version != LIBRARY_VERSION {
        return Err(LibraryError::UnsupportedVersion(doc.version));
    }
    if doc.config_digest.len() != 16 || !doc.config_digest.bytes().all(|b| b.is_ascii_hexdigit()) {
        return Err(LibraryError::BadDigest(doc.config_digest));
    }
    let digest = u64::from_str_radix(&doc.config_digest, 16)
        .expect("16 hex digits always parse as u64");
    if doc.n_tones == 0 || doc.n_tones > MAX_TONES {
        return Err(LibraryError::BadToneCount(doc.n_tones));
    }
    if !doc.matcher.threshold.is_finite() || doc.matcher.threshold <= 0.0 {
        return Err(LibraryError::BadThreshold(doc.matcher.threshold));
    }

    let mut library = FingerprintLibrary::new(digest, doc.n_tones);
    for (identity, docs) in &doc.identities {
        if docs.is_empty() {
            return Err(LibraryError::EmptyIdentity {
                identity: identity.clone(),
            });
        }
        let mut fps = Vec::with_capacity(docs.len());
        for fp_doc in docs {
            if fp_doc.values.len() != doc.n_tones {
                return Err(LibraryError::LengthMismatch {
                    identity: identity.clone(),
                    expected: doc.n_tones,
                    got: fp_doc.values.len(),
                });
            }
            if fp_doc
                .values
                .iter()
                .any(|&(re, im)| !re.is_finite() || !im.is_finite())
            {
                return Err(LibraryError::NonFinite {
                    identity: identity.clone(),
                });
            }
            if fp_doc.n_csi == 0 {
                return Err(LibraryError::ZeroAveragingDepth {
                    identity: identity.clone(),
                });
            }
            fps.push(Fingerprint {
                values: ToneVector::new(
                    fp_doc
                        .values
                        .iter()
                        .map(|&(re, im)| Complex64::new(re, im))
                        .collect(),
                ),
                n_csi: fp_doc.n_csi,
                device_claim: Some(identity.clone()),
                extracted_at: fp_doc.extracted_at,
            });
        }
        library = library.enroll(identity, &fps, false)?;
    }
    Ok(LibraryFile {
        library,
        matcher: doc.matcher,
    })
}

/// Reads a library document from `path`.
pub fn read_library(path: &Path) -> Result<LibraryFile, LibraryError> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    read_library_slice(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matcher::{authenticate, FeatureView, KRule};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_fingerprint(rng: &mut ChaCha8Rng, n_tones: usize, n_csi: usize) -> Fingerprint {
        Fingerprint {
            values: ToneVector::from_fn(n_tones, |_| {
                Complex64::new(1.0 + 0.1 * rng.gen::<f64>(), 0.1 * rng.gen::<f64>())
            }),
            n_csi,
            device_claim: None,
            extracted_at: rng.gen_range(0..1_000_000),
        }
    }

    fn sample_file(n_tones: usize) -> LibraryFile {
        let mut rng = ChaCha8Rng::seed_from_u64(9401);
        let mut library = FingerprintLibrary::new(0x1f2e_3d4c_5b6a_7988, n_tones);
        for identity in ["dev1", "dev2", "dev3"] {
            let fps: Vec<Fingerprint> = (0..4)
                .map(|_| random_fingerprint(&mut rng, n_tones, 50))
                .collect();
            library = library.enroll(identity, &fps, false).unwrap();
        }
        LibraryFile {
            library,
            matcher: MatcherParams {
                k_neighbors: 2,
                threshold: 0.25,
                k_rule: KRule::Explicit,
                feature: FeatureView::Complex,
            },
        }
    }

    #[test]
    fn round_trip_preserves_every_bit() {
        let file = sample_file(7);
        let bytes = to_json_bytes(&file).unwrap();
        let back = read_library_slice(&bytes).unwrap();

        assert_eq!(back.matcher, file.matcher);
        assert_eq!(
            back.library.config_digest(),
            file.library.config_digest()
        );
        assert_eq!(back.library.n_tones(), file.library.n_tones());
        let identities: Vec<&str> = file.library.identities().collect();
        assert_eq!(back.library.identities().collect::<Vec<_>>(), identities);
        for identity in identities {
            let orig = file.library.fingerprints(identity).unwrap();
            let read = back.library.fingerprints(identity).unwrap();
            assert_eq!(orig.len(), read.len());
            for (a, b) in orig.iter().zip(read) {
                assert_eq!(a.n_csi, b.n_csi);
                assert_eq!(a.extracted_at, b.extracted_at);
                assert_eq!(b.device_claim.as_deref(), Some(identity));
                for (va, vb) in a.values.iter().zip(b.values.iter()) {
                    assert_eq!(va.re.to_bits(), vb.re.to_bits());
                    assert_eq!(va.im.to_bits(), vb.im.to_bits());
                }
            }
        }
    }

    #[test]
    fn round_trip_survives_extreme_float_values() {
        let values = [
            0.0,
            -0.0,
            1.0,
            -1.0 / 3.0,
            f64::MIN_POSITIVE,
            1.797_693_134_862_315_7e308,
            5e-324,
            std::f64::consts::PI,
            -2.2250738585072011e-308,
            1.0 + f64::EPSILON,
        ];
        let mut library = FingerprintLibrary::new(1, values.len() / 2);
        let fp = Fingerprint {
            values: ToneVector::new(
                values
                    .chunks_exact(2)
                    .map(|p| Complex64::new(p[0], p[1]))
                    .collect(),
            ),
            n_csi: 1,
            device_claim: None,
            extracted_at: 0,
        };
        library = library.enroll("dev1", &[fp.clone()], false).unwrap();
        let file = LibraryFile {
            library,
            matcher: MatcherParams::sqrt_s(0.5),
        };

        let bytes = to_json_bytes(&file).unwrap();
        let back = read_library_slice(&bytes).unwrap();
        let read = &back.library.fingerprints("dev1").unwrap()[0];
        for (va, vb) in fp.values.iter().zip(read.values.iter()) {
            assert_eq!(va.re.to_bits(), vb.re.to_bits());
            assert_eq!(va.im.to_bits(), vb.im.to_bits());
        }
    }

    #[test]
    fn floats_are_written_with_seventeen_significant_digits() {
        let file = sample_file(3);
        let text = String::from_utf8(to_json_bytes(&file).unwrap()).unwrap();
        // Every float in the document is rendered as `d.dddddddddddddddde±k`:
        // one leading digit, sixteen after the point, an exponent marker.
        let floats: Vec<&str> = text
            .split(['[', ',', ']', '{', '}', ':'])
            .filter(|s| s.contains('.') && s.parse::<f64>().is_ok())
            .collect();
        assert!(!floats.is_empty(), "document contains floats");
        for sample in floats {
            let mantissa = sample.trim_start_matches('-').split('e').next().unwrap();
            let digits: Vec<&str> = mantissa.split('.').collect();
            assert_eq!(digits[0].len(), 1, "one digit before the point: {sample}");
            assert_eq!(digits[1].len(), 16, "sixteen after the point: {sample}");
            assert!(sample.contains('e'), "exponent marker present: {sample}");
        }
    }

    #[test]
    fn round_trip_preserves_authentication_decisions() {
        let file = sample_file(7);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let probes: Vec<Fingerprint> = (0..20)
            .map(|_| random_fingerprint(&mut rng, 7, 50))
            .collect();

        let back = read_library_slice(&to_json_bytes(&file).unwrap()).unwrap();
        for probe in &probes {
            for identity in ["dev1", "dev2", "dev3"] {
                let before =
                    authenticate(&file.library, &file.matcher, identity, probe).unwrap();
                let after =
                    authenticate(&back.library, &back.matcher, identity, probe).unwrap();
                assert_eq!(before.accepted, after.accepted);
                assert_eq!(before.distance.to_bits(), after.distance.to_bits());
            }
        }
    }

    #[test]
    fn second_serialization_is_byte_identical() {
        let file = sample_file(5);
        let first = to_json_bytes(&file).unwrap();
        let back = read_library_slice(&first).unwrap();
        let second = to_json_bytes(&back).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn file_round_trip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("library.json");
        let file = sample_file(7);
        write_library(&path, &file).unwrap();
        let back = read_library(&path).unwrap();
        assert_eq!(back.matcher, file.matcher);
        assert_eq!(back.library.len(), file.library.len());
    }

    fn valid_doc_text() -> String {
        String::from_utf8(to_json_bytes(&sample_file(2)).unwrap()).unwrap()
    }

    #[test]
    fn rejects_wrong_format_tag_version_and_digest() {
        let text = valid_doc_text();

        let wrong_tag = text.replace(LIBRARY_FORMAT_TAG, "not-a-library");
        assert!(matches!(
            read_library_slice(wrong_tag.as_bytes()),
            Err(LibraryError::BadFormatTag(_))
        ));

        let wrong_version = text.replace("\"version\":1", "\"version\":9");
        assert!(matches!(
            read_library_slice(wrong_version.as_bytes()),
            Err(LibraryError::UnsupportedVersion(9))
        ));

        let wrong_digest = text.replace("1f2e3d4c5b6a7988", "not-hex-digits!!");
        assert!(matches!(
            read_library_slice(wrong_digest.as_bytes()),
            Err(LibraryError::BadDigest(_))
        ));

        let short_digest = text.replace("1f2e3d4c5b6a7988", "abc");
        assert!(matches!(
            read_library_slice(short_digest.as_bytes()),
            Err(LibraryError::BadDigest(_))
        ));
    }

    #[test]
    fn rejects_inconsistent_tone_counts_and_bad_contents() {
        let text = valid_doc_text();

        let wrong_len = text.replace("\"n_tones\":2", "\"n_tones\":3");
        assert!(matches!(
            read_library_slice(wrong_len.as_bytes()),
            Err(LibraryError::LengthMismatch { expected: 3, got: 2, .. })
        ));

        let zero_tones = text.replace("\"n_tones\":2", "\"n_tones\":0");
        assert!(matches!(
            read_library_slice(zero_tones.as_bytes()),
            Err(LibraryError::BadToneCount(0))
        ));

        let empty_identity = text.replace("\"identities\":{\"dev1\":[", "\"identities\":{\"dev0\":[],\"dev1\":[");
        assert!(matches!(
            read_library_slice(empty_identity.as_bytes()),
            Err(LibraryError::EmptyIdentity { .. })
        ));

        let bad_threshold = {
            let file = LibraryFile {
                matcher: MatcherParams::sqrt_s(-1.0),
                ..sample_file(2)
            };
            // The writer refuses a non-positive threshold…
            assert!(matches!(
                to_json_bytes(&file),
                Err(LibraryError::BadThreshold(t)) if t == -1.0
            ));
            // …and the reader refuses one smuggled into otherwise valid text.
            valid_doc_text().replace(
                "\"threshold\":2.5000000000000000e-1",
                "\"threshold\":-2.5000000000000000e-1",
            )
        };
        assert!(matches!(
            read_library_slice(bad_threshold.as_bytes()),
            Err(LibraryError::BadThreshold(_))
        ));
    }

    #[test]
    fn junk_inputs_error_without_panicking() {
        let cases: [&[u8]; 6] = [
            b"",
            b"{",
            b"[1,2,3]",
            b"{\"format\":\"csi-fingerprint-library\"}",
            b"\xff\xfe\x00\x01",
            br#"{"format":"csi-fingerprint-library","version":1,
                "config_digest":"0000000000000000","n_tones":1,
                "matcher":{"k_neighbors":0,"threshold":1.0,
                           "k_rule":"banana","feature":"complex"},
                "identities":{}}"#,
        ];
        for bytes in cases {
            assert!(read_library_slice(bytes).is_err());
        }
    }
}
