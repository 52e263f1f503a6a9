use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A parameter failed validation; `field` names the offending input.
    #[error("invalid {field}: {message}")]
    Invalid { field: String, message: String },

    #[error("region is not a subset of the enclosing region: {0}")]
    NotSubset(String),

    #[error("no admissible cover scale: rho candidates {examined:?} miss [1/2, 1]")]
    CoverInfeasible { examined: Vec<(u64, f64)> },

    #[error("infeasible exponent schedule: constraint `{constraint}` violated")]
    InfeasibleExponents { constraint: String },

    #[error("region has {sites} sites, above the dense cap of {cap}")]
    SizeCap { sites: usize, cap: usize },

    #[error("distribution is not Hölder continuous: {0}")]
    NotHolder(String),

    #[error("eigensolver did not converge (residual {residual:e})")]
    Convergence { residual: f64 },

    #[error("product factor {factor} at k={k} is not in (0, 1]")]
    DivergentProduct { k: usize, factor: f64 },

    #[error("overlapping input: {0}")]
    Overlap(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Invalid {
            field: field.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by bad inputs rather than a failure during a run.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Invalid { .. }
                | Error::NotSubset(_)
                | Error::CoverInfeasible { .. }
                | Error::InfeasibleExponents { .. }
                | Error::SizeCap { .. }
                | Error::NotHolder(_)
                | Error::DivergentProduct { .. }
                | Error::Overlap(_)
                | Error::Json(_)
        )
    }
}
