//! Feeds arbitrary bytes to the JSON fingerprint-library reader: parsing
//! and validation must reject malformed input with errors, never panic.

#![no_main]

use libfuzzer_sys::fuzz_target;

use csi_fingerprint::io::library::read_library_slice;

fuzz_target!(|data: &[u8]| {
    let _ = read_library_slice(data);
});
