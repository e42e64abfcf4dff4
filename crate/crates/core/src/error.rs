use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Position-tagged Newick syntax error.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("newick syntax error at byte {offset}: {message}")]
pub struct NewickError {
    pub offset: usize,
    pub message: String,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Newick(#[from] NewickError),

    #[error("invalid tree: {0}")]
    InvalidTree(String),

    #[error("tree is not ultrametric (max relative depth deviation {deviation:.3e} > {tol:.1e})")]
    NotUltrametric { deviation: f64, tol: f64 },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("covariance matrix is singular: leading minor of order {order} is not positive (pivot {pivot:.3e})")]
    SingularCovariance { order: usize, pivot: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("subsampling failed: {0}")]
    Subsample(String),

    #[error("missing value for tip `{0}`")]
    MissingTip(String),

    #[error("config error in `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("no root in bracket [{lo:e}, {hi:e}]: inputs are inconsistent with any (gamma > 0, alpha > 0)")]
    NoRoot { lo: f64, hi: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// True for failures caused by bad user input rather than numerics.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::Newick(_)
                | Error::InvalidTree(_)
                | Error::NotUltrametric { .. }
                | Error::InvalidParameter { .. }
                | Error::Config { .. }
                | Error::MissingTip(_)
                | Error::Json(_)
                | Error::Csv(_)
                | Error::Io(_)
        )
    }
}
