use thiserror::Error;

/// Errors raised anywhere in the application-set pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parameter shape: expected {expected} parameters, got {got}")]
    ParameterShape { expected: usize, got: usize },

    #[error("parameter vector contains a non-finite entry at index {0}")]
    NonFiniteParameter(usize),

    #[error("parameter index {index} out of range for {n} parameters")]
    IndexOutOfRange { index: usize, n: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("QP infeasible; violated inequality rows {rows:?}")]
    Infeasible { rows: Vec<usize> },

    #[error("QP solver did not converge within {iterations} iterations")]
    Convergence { iterations: usize },

    #[error("singular linear system (residual {residual:.3e})")]
    SingularSystem { residual: f64 },

    #[error("closed loop failed at step t={step}: {source}")]
    Step {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("evaluation failed at theta={theta:?}: {source}")]
    Evaluation {
        theta: Vec<f64>,
        #[source]
        source: Box<Error>,
    },

    #[error("non-finite function value at stencil point {0:?}")]
    NonFiniteValue(Vec<f64>),

    #[error("config error: {0}")]
    Config(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn at_step(self, step: usize) -> Self {
        Error::Step {
            step,
            source: Box::new(self),
        }
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// True for configuration and input-validation failures, false for
    /// numerical failures raised while running the pipeline.
    pub fn is_config_error(&self) -> bool {
        match self {
            Error::Config(_)
            | Error::ParameterShape { .. }
            | Error::NonFiniteParameter(_)
            | Error::IndexOutOfRange { .. }
            | Error::Dimension(_)
            | Error::InvalidArgument(_) => true,
            Error::Stage { source, .. } => source.is_config_error(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
