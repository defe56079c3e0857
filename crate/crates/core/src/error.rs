use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unsupported dimension {0}: only d = 2 and d = 3 are supported")]
    UnsupportedDimension(usize),

    #[error("invalid {field}: {constraint}")]
    Invalid { field: String, constraint: String },

    #[error(
        "degenerate initial law: support lies on a line (lambda_min = {lambda_min:.3e} <= {threshold:.3e} along direction {direction:?})"
    )]
    DegenerateInitialLaw {
        lambda_min: f64,
        threshold: f64,
        direction: Vec<f64>,
    },

    #[error("numerical blowup at step {step} (t = {time}): non-finite particle state")]
    NumericalBlowup { step: usize, time: f64 },

    #[error("covariance of particle {particle} is not PSD (eigenvalue {eigenvalue:.3e}, trace {trace:.3e})")]
    NonPsdCovariance {
        particle: usize,
        eigenvalue: f64,
        trace: f64,
    },

    #[error("config parse error: {0}")]
    Parse(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(field: impl Into<String>, constraint: impl Into<String>) -> Self {
        Error::Invalid {
            field: field.into(),
            constraint: constraint.into(),
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
