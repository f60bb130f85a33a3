use thiserror::Error;

use crate::expr::EvalError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failures raised by the numerical pipeline.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("symplectic form is singular at {point:?} (|det| = {det:.3e})")]
    SingularForm { point: Vec<f64>, det: f64 },

    #[error("point {point:?} lies outside the chart")]
    OutOfDomain { point: Vec<f64> },

    #[error("trajectory left the chart at t = {t_exit}")]
    LeftDomain { t_exit: f64 },

    #[error("step size control stalled at t = {t}")]
    StepFailure { t: f64 },

    #[error("linear solve residual {residual:.3e} exceeds tolerance")]
    SolveResidual { residual: f64 },

    #[error("point is not regular: smallest singular value of dF is {sigma_min:.3e}")]
    NotRegular { sigma_min: f64 },

    #[error("Newton iteration diverged ({context})")]
    NewtonDivergence { context: String },

    #[error("form is not closed (residual {residual:.3e})")]
    NotClosed { residual: f64 },

    #[error("quadrature produced a non-finite value")]
    QuadratureFailure,

    #[error("chart inversion failed at {point:?}")]
    InversionFailure { point: Vec<f64> },

    #[error("vector fields are rank deficient (smallest singular value {sigma_min:.3e})")]
    RankDeficient { sigma_min: f64 },

    #[error("no transversal coordinate extends the commuting family")]
    NoIndependentCandidate,

    #[error("flows do not commute (residual {residual:.3e})")]
    NotCommuting { residual: f64 },

    #[error("{what} residual {value:.3e} exceeds {tolerance:.1e}")]
    ResidualExceeded {
        what: &'static str,
        value: f64,
        tolerance: f64,
    },

    #[error("unknown system `{0}`")]
    UnknownSystem(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("expression evaluation failed: {0}")]
    Eval(#[from] EvalError),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        source: Box<Error>,
    },
}

impl Error {
    /// Tags an error with the pipeline stage that produced it.
    pub fn at_stage(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// Innermost error, with stage wrappers removed.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            e => e,
        }
    }
}

pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| e.at_stage(stage))
    }
}
