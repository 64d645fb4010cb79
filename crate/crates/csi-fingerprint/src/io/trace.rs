//! Binary CSI trace files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic            8 bytes  b"CSIFPTRC"
//! version          u8       currently 1
//! config digest    u64      SignalConfig::digest of the writing config
//! dft length       u16
//! leak halfwidth   u16
//! tones per record u16
//! map name         u8 length + UTF-8 bytes
//! device count     u16
//! device names     per device: u8 length + UTF-8 bytes
//! record count     u64      u64::MAX while a writer is still appending
//! records          device index u16, rx chain u8, seq no u64,
//!                  timestamp µs u64, then per tone: re f64, im f64
//! ```
//!
//! Records are ordered by (device index, chain, seq no), strictly
//! increasing; readers reject violations so downstream consumers can rely
//! on grouped, time-ordered streams. The record count is back-patched by
//! [`TraceWriter::finalize`]; a file whose count still reads `u64::MAX`
//! (e.g. after a crash) is readable to its end.

use crate::signal::SignalConfig;
use crate::sim::CsiMeasurement;
use num_complex::Complex64;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;
use thiserror::Error;

const MAGIC: [u8; 8] = *b"CSIFPTRC";
const VERSION: u8 = 1;
/// Sentinel record count of a trace still being written.
const UNFINALIZED: u64 = u64::MAX;
/// Hardening caps for untrusted headers: bound allocations before any
/// record is read.
const MAX_DEVICES: usize = 4096;
const MAX_TONES: usize = 4096;

/// Errors reading or writing trace files.
#[derive(Debug, Error)]
pub enum TraceError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("not a CSI trace file (bad magic)")]
    BadMagic,
    #[error("unsupported trace format version {0}")]
    UnsupportedVersion(u8),
    #[error("config digest mismatch: file has {got:#018x}, expected {expected:#018x}")]
    DigestMismatch { expected: u64, got: u64 },
    #[error("invalid header: {0}")]
    InvalidHeader(&'static str),
    #[error("file ends mid-record after {records_read} complete records")]
    Truncated { records_read: u64 },
    #[error("record {record} is malformed: {reason}")]
    Malformed { record: u64, reason: &'static str },
    #[error("record {record} breaks (device, chain, seq_no) ordering")]
    OutOfOrder { record: u64 },
    #[error("record {record} names device index {index} but the header lists {device_count}")]
    UnknownDeviceIndex {
        record: u64,
        index: u16,
        device_count: usize,
    },
    #[error("unknown device `{0}` (not in this trace's device list)")]
    UnknownDevice(String),
    #[error("measurement has {got} tones, trace records {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("device name longer than 255 bytes")]
    NameTooLong,
    #[error("trace lists {0} devices, cap is {MAX_DEVICES}")]
    TooManyDevices(usize),
}

/// Parsed trace header.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceHeader {
    pub config_digest: u64,
    pub dft_len: usize,
    pub leak_halfwidth: usize,
    pub n_tones: usize,
    pub map_name: String,
    pub devices: Vec<String>,
    /// `None` while unfinalized (writer never called finalize).
    pub record_count: Option<u64>,
}

impl TraceHeader {
    /// Checks that the trace was written under `config` (by digest).
    pub fn check_config(&self, config: &SignalConfig) -> Result<(), TraceError> {
        if self.config_digest != config.digest() {
            return Err(TraceError::DigestMismatch {
                expected: config.digest(),
                got: self.config_digest,
            });
        }
        Ok(())
    }
}

fn write_name<W: Write>(w: &mut W, name: &str) -> Result<(), TraceError> {
    let bytes = name.as_bytes();
    if bytes.len() > u8::MAX as usize {
        return Err(TraceError::NameTooLong);
    }
    w.write_all(&[bytes.len() as u8])?;
    w.write_all(bytes)?;
    Ok(())
}

/// Streaming trace writer. Records must arrive in (device, chain, seq_no)
/// order; call [`TraceWriter::finalize`] to stamp the record count.
pub struct TraceWriter<W: Write + Seek> {
    sink: W,
    devices: Vec<String>,
    n_tones: usize,
    count_offset: u64,
    records_written: u64,
    last_key: Option<(u16, u8, u64)>,
    record_buf: Vec<u8>,
}

impl<W: Write + Seek> TraceWriter<W> {
    /// Writes the header and returns a writer ready for records.
    pub fn new(
        mut sink: W,
        config: &SignalConfig,
        devices: &[String],
    ) -> Result<Self, TraceError> {
        if devices.is_empty() {
            return Err(TraceError::InvalidHeader("no devices"));
        }
        if devices.len() > MAX_DEVICES {
            return Err(TraceError::TooManyDevices(devices.len()));
        }
        sink.write_all(&MAGIC)?;
        sink.write_all(&[VERSION])?;
        sink.write_all(&config.digest().to_le_bytes())?;
        sink.write_all(&(config.dft_len() as u16).to_le_bytes())?;
        sink.write_all(&(config.leak_halfwidth() as u16).to_le_bytes())?;
        sink.write_all(&(config.n_tones() as u16).to_le_bytes())?;
        write_name(&mut sink, config.map_name())?;
        sink.write_all(&(devices.len() as u16).to_le_bytes())?;
        for device in devices {
            write_name(&mut sink, device)?;
        }
        let count_offset = sink.stream_position()?;
        sink.write_all(&UNFINALIZED.to_le_bytes())?;
        Ok(TraceWriter {
            sink,
            devices: devices.to_vec(),
            n_tones: config.n_tones(),
            count_offset,
            records_written: 0,
            last_key: None,
            record_buf: Vec::with_capacity(19 + 16 * config.n_tones()),
        })
    }

    /// Appends one measurement; enforces ordering and tone count.
    pub fn write_record(&mut self, m: &CsiMeasurement) -> Result<(), TraceError> {
        let index = self
            .devices
            .iter()
            .position(|d| *d == m.device_id)
            .ok_or_else(|| TraceError::UnknownDevice(m.device_id.clone()))? as u16;
        if m.csi.len() != self.n_tones {
            return Err(TraceError::LengthMismatch {
                expected: self.n_tones,
                got: m.csi.len(),
            });
        }
        let key = (index, m.rx_chain, m.seq_no);
        if let Some(last) = self.last_key {
            if key <= last {
                return Err(TraceError::OutOfOrder {
                    record: self.records_written,
                });
            }
        }
        if !m.csi.is_finite() {
            return Err(TraceError::Malformed {
                record: self.records_written,
                reason: "non-finite sample",
            });
        }
        self.record_buf.clear();
        self.record_buf.extend_from_slice(&index.to_le_bytes());
        self.record_buf.push(m.rx_chain);
        self.record_buf.extend_from_slice(&m.seq_no.to_le_bytes());
        self.record_buf
            .extend_from_slice(&m.timestamp_us.to_le_bytes());
        for v in m.csi.iter() {
            self.record_buf.extend_from_slice(&v.re.to_le_bytes());
            self.record_buf.extend_from_slice(&v.im.to_le_bytes());
        }
        self.sink.write_all(&self.record_buf)?;
        self.last_key = Some(key);
        self.records_written += 1;
        Ok(())
    }

    /// Back-patches the record count and returns the sink.
    pub fn finalize(mut self) -> Result<W, TraceError> {
        let end = self.sink.stream_position()?;
        self.sink.seek(SeekFrom::Start(self.count_offset))?;
        self.sink.write_all(&self.records_written.to_le_bytes())?;
        self.sink.seek(SeekFrom::Start(end))?;
        self.sink.flush()?;
        Ok(self.sink)
    }

    pub fn records_written(&self) -> u64 {
        self.records_written
    }
}

fn read_exact_or<R: Read>(
    source: &mut R,
    buf: &mut [u8],
    err: impl FnOnce() -> TraceError,
) -> Result<(), TraceError> {
    source.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            err()
        } else {
            TraceError::Io(e)
        }
    })
}

fn read_u8<R: Read>(source: &mut R) -> Result<u8, TraceError> {
    let mut b = [0u8; 1];
    read_exact_or(source, &mut b, || TraceError::InvalidHeader("short header"))?;
    Ok(b[0])
}

fn read_u16<R: Read>(source: &mut R) -> Result<u16, TraceError> {
    let mut b = [0u8; 2];
    read_exact_or(source, &mut b, || TraceError::InvalidHeader("short header"))?;
    Ok(u16::from_le_bytes(b))
}

fn read_u64<R: Read>(source: &mut R) -> Result<u64, TraceError> {
    let mut b = [0u8; 8];
    read_exact_or(source, &mut b, || TraceError::InvalidHeader("short header"))?;
    Ok(u64::from_le_bytes(b))
}

fn read_name<R: Read>(source: &mut R) -> Result<String, TraceError> {
    let len = read_u8(source)? as usize;
    let mut bytes = vec![0u8; len];
    read_exact_or(source, &mut bytes, || {
        TraceError::InvalidHeader("short header")
    })?;
    String::from_utf8(bytes).map_err(|_| TraceError::InvalidHeader("name is not UTF-8"))
}

/// Streaming trace reader: parses the header eagerly, then yields one
/// validated [`CsiMeasurement`] at a time (constant memory in the record
/// count).
pub struct TraceReader<R: Read> {
    source: R,
    header: TraceHeader,
    records_read: u64,
    last_key: Option<(u16, u8, u64)>,
    record_buf: Vec<u8>,
    done: bool,
}

impl<R: Read> TraceReader<R> {
    pub fn new(mut source: R) -> Result<Self, TraceError> {
        let mut magic = [0u8; 8];
        read_exact_or(&mut source, &mut magic, || TraceError::BadMagic)?;
        if magic != MAGIC {
            return Err(TraceError::BadMagic);
        }
        let version = read_u8(&mut source)?;
        if version != VERSION {
            return Err(TraceError::UnsupportedVersion(version));
        }
        let config_digest = read_u64(&mut source)?;
        let dft_len = read_u16(&mut source)? as usize;
        let leak_halfwidth = read_u16(&mut source)? as usize;
        let n_tones = read_u16(&mut source)? as usize;
        if n_tones == 0 || n_tones > MAX_TONES {
            return Err(TraceError::InvalidHeader("tone count out of range"));
        }
        let map_name = read_name(&mut source)?;
        let device_count = read_u16(&mut source)? as usize;
        if device_count == 0 {
            return Err(TraceError::InvalidHeader("no devices"));
        }
        if device_count > MAX_DEVICES {
            return Err(TraceError::TooManyDevices(device_count));
        }
        let mut devices = Vec::with_capacity(device_count);
        for _ in 0..device_count {
            devices.push(read_name(&mut source)?);
        }
        let raw_count = read_u64(&mut source)?;
        let record_count = (raw_count != UNFINALIZED).then_some(raw_count);
        Ok(TraceReader {
            source,
            records_read: 0,
            last_key: None,
            record_buf: vec![0u8; 19 + 16 * n_tones],
            done: false,
            header: TraceHeader {
                config_digest,
                dft_len,
                leak_halfwidth,
                n_tones,
                map_name,
                devices,
                record_count,
            },
        })
    }

    pub fn header(&self) -> &TraceHeader {
        &self.header
    }

    pub fn records_read(&self) -> u64 {
        self.records_read
    }

    fn next_record(&mut self) -> Result<Option<CsiMeasurement>, TraceError> {
        if self.done {
            return Ok(None);
        }
        if self.header.record_count == Some(self.records_read) {
            // All announced records read; anything further is garbage.
            let mut probe = [0u8; 1];
            self.done = true;
            return match self.source.read(&mut probe)? {
                0 => Ok(None),
                _ => Err(TraceError::Malformed {
                    record: self.records_read,
                    reason: "data after final record",
                }),
            };
        }
        // An unfinalized trace ends wherever the data does — but only at a
        // record boundary.
        let first = self.source.read(&mut self.record_buf[..1])?;
        if first == 0 {
            self.done = true;
            if self.header.record_count.is_some() {
                return Err(TraceError::Truncated {
                    records_read: self.records_read,
                });
            }
            return Ok(None);
        }
        read_exact_or(&mut self.source, &mut self.record_buf[1..], || {
            TraceError::Truncated {
                records_read: self.records_read,
            }
        })?;
        let buf = &self.record_buf;
        let index = u16::from_le_bytes([buf[0], buf[1]]);
        let rx_chain = buf[2];
        let seq_no = u64::from_le_bytes(buf[3..11].try_into().expect("fixed slice"));
        let timestamp_us = u64::from_le_bytes(buf[11..19].try_into().expect("fixed slice"));
        let device_id = self
            .header
            .devices
            .get(index as usize)
            .ok_or(TraceError::UnknownDeviceIndex {
                record: self.records_read,
                index,
                device_count: self.header.devices.len(),
            })?
            .clone();
        let key = (index, rx_chain, seq_no);
        if let Some(last) = self.last_key {
            if key <= last {
                return Err(TraceError::OutOfOrder {
                    record: self.records_read,
                });
            }
        }
        let mut csi = Vec::with_capacity(self.header.n_tones);
        for tone in 0..self.header.n_tones {
            let at = 19 + 16 * tone;
            let re = f64::from_le_bytes(buf[at..at + 8].try_into().expect("fixed slice"));
            let im =
                f64::from_le_bytes(buf[at + 8..at + 16].try_into().expect("fixed slice"));
            if !re.is_finite() || !im.is_finite() {
                return Err(TraceError::Malformed {
                    record: self.records_read,
                    reason: "non-finite sample",
                });
            }
            csi.push(Complex64::new(re, im));
        }
        self.last_key = Some(key);
        self.records_read += 1;
        Ok(Some(CsiMeasurement {
            device_id,
            rx_chain,
            seq_no,
            timestamp_us,
            csi: crate::signal::ToneVector::new(csi),
        }))
    }
}

impl<R: Read> Iterator for TraceReader<R> {
    type Item = Result<CsiMeasurement, TraceError>;

    fn next(&mut self) -> Option<Self::Item> {
        match self.next_record() {
            Ok(Some(m)) => Some(Ok(m)),
            Ok(None) => None,
            Err(e) => {
                self.done = true;
                Some(Err(e))
            }
        }
    }
}

/// Writes a whole measurement stream to `path` and finalizes the count.
pub fn write_trace<I>(
    path: &Path,
    config: &SignalConfig,
    devices: &[String],
    stream: I,
) -> Result<u64, TraceError>
where
    I: IntoIterator<Item = CsiMeasurement>,
{
    let file = File::create(path)?;
    let mut writer = TraceWriter::new(BufWriter::new(file), config, devices)?;
    for m in stream {
        writer.write_record(&m)?;
    }
    let written = writer.records_written();
    writer.finalize()?.flush()?;
    Ok(written)
}

/// Opens a trace for streaming reads.
pub fn read_trace(path: &Path) -> Result<TraceReader<BufReader<File>>, TraceError> {
    TraceReader::new(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{make_device_profile, Session, SessionParams};
    use std::io::Cursor;

    fn config() -> SignalConfig {
        SignalConfig::ht20()
    }

    fn sample_measurements(n_packets: usize) -> Vec<CsiMeasurement> {
        let config = config();
        let profile = make_device_profile(&config, "dev1", 7, -25.0, 0.5).unwrap();
        let params = SessionParams {
            n_packets,
            ..SessionParams::default()
        };
        let session = Session::new(&config, &profile, &params, 7, "a").unwrap();
        session
            .into_chain_streams()
            .into_iter()
            .flatten()
            .collect()
    }

    fn write_to_vec(measurements: &[CsiMeasurement]) -> Vec<u8> {
        let mut writer =
            TraceWriter::new(Cursor::new(Vec::new()), &config(), &["dev1".to_string()])
                .unwrap();
        for m in measurements {
            writer.write_record(m).unwrap();
        }
        writer.finalize().unwrap().into_inner()
    }

    #[test]
    fn round_trip_preserves_records_bit_exactly() {
        let measurements = sample_measurements(2);
        let bytes = write_to_vec(&measurements);
        let mut reader = TraceReader::new(Cursor::new(&bytes)).unwrap();
        assert_eq!(reader.header().record_count, Some(4));
        assert_eq!(reader.header().n_tones, 56);
        assert_eq!(reader.header().map_name, "ht20");
        assert_eq!(reader.header().devices, vec!["dev1".to_string()]);
        reader.header().check_config(&config()).unwrap();
        let back: Vec<CsiMeasurement> =
            reader.by_ref().collect::<Result<_, _>>().unwrap();
        assert_eq!(back.len(), measurements.len());
        for (a, b) in back.iter().zip(&measurements) {
            assert_eq!(a.device_id, b.device_id);
            assert_eq!(a.rx_chain, b.rx_chain);
            assert_eq!(a.seq_no, b.seq_no);
            assert_eq!(a.timestamp_us, b.timestamp_us);
            for (x, y) in a.csi.iter().zip(b.csi.iter()) {
                assert_eq!(x.re.to_bits(), y.re.to_bits());
                assert_eq!(x.im.to_bits(), y.im.to_bits());
            }
        }
    }

    #[test]
    fn truncated_file_names_last_good_record() {
        let measurements = sample_measurements(3);
        let bytes = write_to_vec(&measurements);
        // Cut into the middle of the fourth record.
        let record_size = 19 + 16 * 56;
        let header_size = bytes.len() - 6 * record_size;
        let cut = header_size + 3 * record_size + 41;
        let mut reader = TraceReader::new(Cursor::new(&bytes[..cut])).unwrap();
        let mut good = 0;
        let err = loop {
            match reader.next() {
                Some(Ok(_)) => good += 1,
                Some(Err(e)) => break e,
                None => panic!("truncation not detected"),
            }
        };
        assert_eq!(good, 3);
        assert!(matches!(err, TraceError::Truncated { records_read: 3 }));
    }

    #[test]
    fn clean_eof_on_finalized_count_and_error_on_trailing_garbage() {
        let measurements = sample_measurements(2);
        let mut bytes = write_to_vec(&measurements);
        let reader = TraceReader::new(Cursor::new(&bytes)).unwrap();
        assert_eq!(reader.filter_map(Result::ok).count(), 4);
        bytes.push(0xFF);
        let reader = TraceReader::new(Cursor::new(&bytes)).unwrap();
        let last = reader.last().unwrap();
        assert!(matches!(
            last,
            Err(TraceError::Malformed { record: 4, reason: "data after final record" })
        ));
    }

    #[test]
    fn unfinalized_trace_reads_to_the_end() {
        let measurements = sample_measurements(2);
        let mut writer =
            TraceWriter::new(Cursor::new(Vec::new()), &config(), &["dev1".to_string()])
                .unwrap();
        for m in &measurements {
            writer.write_record(m).unwrap();
        }
        // No finalize: count stays at the sentinel.
        let bytes = {
            let mut sink = writer.sink;
            sink.flush().unwrap();
            sink.into_inner()
        };
        let mut reader = TraceReader::new(Cursor::new(&bytes)).unwrap();
        assert_eq!(reader.header().record_count, None);
        let back: Vec<CsiMeasurement> =
            reader.by_ref().collect::<Result<_, _>>().unwrap();
        assert_eq!(back.len(), 4);
    }

    #[test]
    fn writer_rejects_out_of_order_and_wrong_length() {
        let measurements = sample_measurements(2);
        let mut writer =
            TraceWriter::new(Cursor::new(Vec::new()), &config(), &["dev1".to_string()])
                .unwrap();
        writer.write_record(&measurements[1]).unwrap();
        assert!(matches!(
            writer.write_record(&measurements[0]),
            Err(TraceError::OutOfOrder { record: 1 })
        ));
        let mut short = measurements[2].clone();
        short.csi = crate::signal::ToneVector::zeros(3);
        assert!(matches!(
            writer.write_record(&short),
            Err(TraceError::LengthMismatch { expected: 56, got: 3 })
        ));
        let mut unknown = measurements[2].clone();
        unknown.device_id = "devX".to_string();
        assert!(matches!(
            writer.write_record(&unknown),
            Err(TraceError::UnknownDevice(_))
        ));
    }

    #[test]
    fn reader_rejects_out_of_order_records() {
        let measurements = sample_measurements(2);
        let bytes = write_to_vec(&measurements);
        let record_size = 19 + 16 * 56;
        let header_size = bytes.len() - 4 * record_size;
        let mut swapped = bytes.clone();
        let (a, b) = (header_size, header_size + record_size);
        let tmp: Vec<u8> = swapped[a..a + record_size].to_vec();
        swapped.copy_within(b..b + record_size, a);
        swapped[b..b + record_size].copy_from_slice(&tmp);
        let reader = TraceReader::new(Cursor::new(&swapped)).unwrap();
        let err = reader
            .filter_map(Result::err)
            .next()
            .expect("swap must break ordering");
        assert!(matches!(err, TraceError::OutOfOrder { record: 1 }));
    }

    #[test]
    fn header_validation_rejects_junk() {
        assert!(matches!(
            TraceReader::new(Cursor::new(b"NOTATRACE______".to_vec())),
            Err(TraceError::BadMagic)
        ));
        let measurements = sample_measurements(1);
        let mut bytes = write_to_vec(&measurements);
        bytes[8] = 9; // version byte
        assert!(matches!(
            TraceReader::new(Cursor::new(&bytes)),
            Err(TraceError::UnsupportedVersion(9))
        ));
        let empty: Vec<u8> = Vec::new();
        assert!(TraceReader::new(Cursor::new(&empty)).is_err());
    }

    #[test]
    fn digest_mismatch_is_reported_against_caller_config() {
        let measurements = sample_measurements(1);
        let bytes = write_to_vec(&measurements);
        let reader = TraceReader::new(Cursor::new(&bytes)).unwrap();
        let other = SignalConfig::build(64, "ht20", 6).unwrap();
        assert!(matches!(
            reader.header().check_config(&other),
            Err(TraceError::DigestMismatch { .. })
        ));
    }

    #[test]
    fn multi_device_round_trip_through_files() {
        let config = config();
        let params = SessionParams {
            n_packets: 3,
            ..SessionParams::default()
        };
        let devices: Vec<String> = vec!["dev1".into(), "dev2".into()];
        let mut all = Vec::new();
        for device in &devices {
            let profile = make_device_profile(&config, device, 7, -25.0, 0.5).unwrap();
            let session = Session::new(&config, &profile, &params, 7, "a").unwrap();
            all.extend(session.into_chain_streams().into_iter().flatten());
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("multi.trace");
        let written = write_trace(&path, &config, &devices, all.clone()).unwrap();
        assert_eq!(written, 12);
        let reader = read_trace(&path).unwrap();
        assert_eq!(reader.header().devices, devices);
        let back: Vec<CsiMeasurement> = reader.collect::<Result<_, _>>().unwrap();
        assert_eq!(back.len(), all.len());
        for (a, b) in back.iter().zip(&all) {
            assert_eq!(a.device_id, b.device_id);
            assert_eq!(a.seq_no, b.seq_no);
        }
    }
}
