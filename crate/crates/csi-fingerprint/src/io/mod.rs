//! File formats: the binary CSI trace and the JSON fingerprint library.
//!
//! Both formats are platform-independent — the trace is little-endian
//! with IEEE-754 doubles, the library is UTF-8 JSON — and both round-trip
//! losslessly. Readers treat input as untrusted: every length, index, and
//! value is validated before use, and errors carry the position of the
//! first bad record.

pub mod library;
pub mod trace;

pub use library::{read_library, read_library_slice, write_library, LibraryError, LibraryFile};
pub use trace::{read_trace, write_trace, TraceError, TraceHeader, TraceReader, TraceWriter};
