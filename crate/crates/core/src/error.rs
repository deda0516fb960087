use thiserror::Error;

/// Errors raised anywhere in the decoding pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("missing subject {0}")]
    MissingSubject(u32),
    #[error("subject {0} is already present in the model")]
    SubjectConflict(u32),
    #[error("contract violation: {0}")]
    ContractViolation(String),
    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),
    #[error("gradient check failed: worst element {index} (analytic {analytic:e}, numeric {numeric:e}, rel err {rel_err:e} > {tolerance:e})")]
    GradCheck {
        index: usize,
        analytic: f64,
        numeric: f64,
        rel_err: f64,
        tolerance: f64,
    },
    #[error("data error: {0}")]
    Data(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}
