use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value failed validation. `field` is a dotted path.
    #[error("invalid value for `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },

    #[error("config parse error in {path}: {message}")]
    ConfigParse { path: String, message: String },

    #[error("expected a {expected} series, got {found}")]
    UnitMismatch {
        expected: &'static str,
        found: &'static str,
    },

    #[error("log argument {value:e} at sample {index} is not positive")]
    NonPositiveLogArgument { index: usize, value: f64 },

    #[error(
        "Euler update unstable: dt = {dt_s:e} s with f3dB = {f3db_hz} Hz gives dt/tau = {ratio:.4} (must be < 1)"
    )]
    EulerUnstable { dt_s: f64, f3db_hz: f64, ratio: f64 },

    #[error("pixel {index}: {source}")]
    Pixel {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(
        "{clamped} of {n_pixels} sampled thresholds fall below the {floor} floor (limit is 0.1%)"
    )]
    ThresholdClamping {
        clamped: usize,
        n_pixels: usize,
        floor: f64,
    },

    #[error("Gaussian CDF fit is degenerate: {0}")]
    DegenerateFit(&'static str),

    #[error("curve never crosses 50% probability (max {max_probability})")]
    NoCrossing { max_probability: f64 },

    #[error("curve never reaches a sustained plateau at or above {level}")]
    NeverReachesOne { level: f64 },

    #[error(
        "noise bracket [{lo:e}, {hi:e}] does not straddle target {target_hz} Hz (BA at bounds: {ba_lo} Hz, {ba_hi} Hz)"
    )]
    BracketFailure {
        lo: f64,
        hi: f64,
        ba_lo: f64,
        ba_hi: f64,
        target_hz: f64,
    },

    #[error("noise calibration did not reach {tolerance} relative tolerance after {iterations} iterations (best {best_ba_hz} Hz at sigma {best_sigma})")]
    CalibrationDidNotConverge {
        iterations: usize,
        tolerance: f64,
        best_sigma: f64,
        best_ba_hz: f64,
    },

    #[error(
        "curve at {baseline_lux} lx has C = {contrast} <= theta_ref = {theta_ref}: no dark-current signal"
    )]
    NoDarkCurrentSignal {
        baseline_lux: f64,
        contrast: f64,
        theta_ref: f64,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Validation failure for `field`.
    pub fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// I/O failure on `path`.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input (configs, arguments, files
    /// that do not parse) as opposed to failures of a well-formed run.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::InvalidConfig { .. }
            | Error::ConfigParse { .. }
            | Error::UnitMismatch { .. }
            | Error::EulerUnstable { .. }
            | Error::ThresholdClamping { .. }
            | Error::Parse { .. } => true,
            Error::Pixel { source, .. } => source.is_validation(),
            _ => false,
        }
    }
}
