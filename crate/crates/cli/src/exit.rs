//! Exit codes and the single-line error report.

use ldct_core::Error;

pub const OTHER: u8 = 1;
pub const USAGE: u8 = 2;
pub const IO: u8 = 3;
pub const CONFIG: u8 = 4;
pub const FORMAT: u8 = 5;
pub const SHAPE: u8 = 6;
pub const NON_FINITE: u8 = 7;
pub const INVALID: u8 = 8;

pub fn classify(e: &Error) -> (u8, &'static str) {
    match e {
        Error::Io { .. } => (IO, "io"),
        Error::Config(_) => (CONFIG, "config"),
        Error::BadMagic { .. }
        | Error::Truncated { .. }
        | Error::Dimensions { .. }
        | Error::Checkpoint(_)
        | Error::Png(_)
        | Error::NonFinite { .. } => (FORMAT, "format"),
        Error::Shape(_) => (SHAPE, "shape"),
        Error::NonFiniteLoss { .. } => (NON_FINITE, "non_finite"),
        Error::InvalidArgument(_) | Error::EmptySampleSet(_) => (INVALID, "invalid"),
    }
}

/// One JSON object on stderr: `{"error":kind,"code":n,"message":…}`.
pub fn report(code: u8, kind: &str, message: &str) {
    let line = serde_json::json!({ "error": kind, "code": code, "message": message });
    eprintln!("{line}");
}
