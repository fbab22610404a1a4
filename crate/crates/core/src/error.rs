//! Crate-wide error type.

use std::fmt;

/// Everything a library call can reject or fail on.
#[derive(Debug)]
pub enum KnockError {
    /// Non-physical engine geometry (bore, speed of sound, rpm, resolution).
    Geometry(String),
    /// A frequency request outside the representable band.
    OutOfBand { requested_hz: f64, nyquist_hz: f64 },
    /// A cycle does not cover the analysis window, or grids are inconsistent.
    Coverage(String),
    /// Invalid argument value (ranges, empty inputs, inconsistent lengths).
    Domain(String),
    /// Layer sizing failed; names the offending layer.
    Shape(String),
    /// Covariance rank too low for the requested component count.
    Rank(String),
    /// A fit could not produce a usable model (single-class data, non-finite optimum).
    DegenerateFit(String),
    /// Model container violations: bad magic, version, mode tag, truncation.
    ModelFormat(String),
    /// Text data files: parse failure with file and 1-based row.
    Parse { path: String, row: usize, message: String },
    Io(std::io::Error),
}

impl fmt::Display for KnockError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KnockError::Geometry(m) => write!(f, "invalid geometry: {m}"),
            KnockError::OutOfBand { requested_hz, nyquist_hz } => write!(
                f,
                "frequency {requested_hz} Hz is outside the representable band (Nyquist {nyquist_hz} Hz)"
            ),
            KnockError::Coverage(m) => write!(f, "window coverage: {m}"),
            KnockError::Domain(m) => write!(f, "invalid input: {m}"),
            KnockError::Shape(m) => write!(f, "layer sizing: {m}"),
            KnockError::Rank(m) => write!(f, "rank deficiency: {m}"),
            KnockError::DegenerateFit(m) => write!(f, "degenerate fit: {m}"),
            KnockError::ModelFormat(m) => write!(f, "model file: {m}"),
            KnockError::Parse { path, row, message } => {
                write!(f, "{path}: row {row}: {message}")
            }
            KnockError::Io(e) => write!(f, "i/o: {e}"),
        }
    }
}

impl std::error::Error for KnockError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            KnockError::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for KnockError {
    fn from(e: std::io::Error) -> Self {
        KnockError::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, KnockError>;
