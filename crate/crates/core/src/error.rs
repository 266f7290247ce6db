use std::path::PathBuf;

use thiserror::Error;

use crate::autodiff::AdError;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] AdError),

    #[error("wavelength {wavelength_um} um is outside the modeled band [0.4, 0.8] um")]
    WavelengthOutOfBand { wavelength_um: f64 },

    #[error("invalid material `{name}`: {reason}")]
    InvalidMaterial { name: String, reason: String },

    #[error("unknown material `{name}`; available: {}", available.join(", "))]
    UnknownMaterial { name: String, available: Vec<String> },

    #[error("lens invariant violated: {0}")]
    Invariant(String),

    #[error("chief ray search failed for field {field_deg} deg: {reason}")]
    ChiefRay { field_deg: f64, reason: String },

    #[error("degenerate PSF at field {field_deg} deg ({wavelength_um} um): no valid rays")]
    DegeneratePsf { field_deg: f64, wavelength_um: f64 },

    #[error("degenerate trace at field {field_deg} deg ({wavelength_um} um): {valid} valid rays, need at least 2")]
    DegenerateTrace { field_deg: f64, wavelength_um: f64, valid: usize },

    #[error("spot statistics need at least 2 valid hits, got {0}")]
    TooFewHits(usize),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite gradient for {param} (loss term `{term}`)")]
    NonFiniteGradient { param: String, term: String },

    #[error("gradient supplied for parameter {0} which is not in any group")]
    UnknownParameter(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("infeasible layout: {0}")]
    Infeasible(String),

    #[error("design aborted after {failures} consecutive failed steps at step {step}: {last}")]
    DesignAborted { step: usize, failures: usize, last: String },

    #[error("parse error in {path}: {msg}")]
    Parse { path: String, msg: String },

    #[error("bad network weight file: {0}")]
    NetFormat(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error: {0}")]
    Image(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Short machine-readable tag used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Autodiff(_) => "autodiff",
            Error::WavelengthOutOfBand { .. } | Error::InvalidMaterial { .. } => "domain",
            Error::UnknownMaterial { .. } => "material",
            Error::Invariant(_) => "invariant",
            Error::ChiefRay { .. } => "chief_ray",
            Error::DegeneratePsf { .. } => "degenerate_psf",
            Error::DegenerateTrace { .. } | Error::TooFewHits(_) => "degenerate_trace",
            Error::Shape(_) => "shape",
            Error::NonFiniteGradient { .. } => "non_finite_gradient",
            Error::UnknownParameter(_) => "unknown_parameter",
            Error::Usage(_) => "usage",
            Error::Infeasible(_) => "infeasible",
            Error::DesignAborted { .. } => "aborted",
            Error::Parse { .. } => "parse",
            Error::NetFormat(_) => "net_format",
            Error::Io { .. } => "io",
            Error::Image(_) => "image",
        }
    }
}
