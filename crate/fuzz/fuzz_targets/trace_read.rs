//! Feeds arbitrary bytes to the binary trace reader: header parsing and
//! record decoding must reject malformed input with errors, never panic,
//! and never read past the buffer.

#![no_main]

use libfuzzer_sys::fuzz_target;

use csi_fingerprint::io::trace::TraceReader;

fuzz_target!(|data: &[u8]| {
    let Ok(reader) = TraceReader::new(std::io::Cursor::new(data)) else {
        return;
    };
    for record in reader {
        if record.is_err() {
            break;
        }
    }
});
