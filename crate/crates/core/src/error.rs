use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Every failure the library can report. Each variant maps to a stable,
/// machine-parsable code via [`Error::code`].
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid dimension {0}: must be at least 1")]
    InvalidDimension(i64),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("grid too coarse: none of the {nodes} nodes has its stencil neighborhood inside the domain")]
    GridTooCoarse { nodes: usize },

    #[error("stencil neighbor of node {node} along {vector:?} lies outside the grid")]
    StencilOutOfDomain { node: usize, vector: Vec<i64> },

    #[error("matrix cannot be decomposed with weights in [{hat_delta}, 1/{hat_delta}] (best slack {slack:.3e})")]
    DecompositionInfeasible { hat_delta: f64, slack: f64 },

    #[error("no feasible hat-delta found above {floor:e}")]
    SearchFailed { floor: f64 },

    #[error("ellipticity violation: {0}")]
    EllipticityViolation(String),

    #[error("invalid specification: {0}")]
    InvalidSpec(String),

    #[error("time step {tau:e} exceeds the monotonicity bound {max_tau:e}")]
    RefuseToStep { tau: f64, max_tau: f64 },

    #[error("drift condition violated: h * L_grad = {lhs:e} exceeds the lower ellipticity bound {rhs:e}")]
    DriftConditionViolated { lhs: f64, rhs: f64 },

    #[error("non-finite value at step {step} (t = {t})")]
    DivergenceDetected { step: usize, t: f64 },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("monotonicity in K violated between K = {k_low} and K = {k_high}: positive increment {violation:e}")]
    MonotonicityCheckFailed { k_low: f64, k_high: f64, violation: f64 },

    #[error("incompatible refinement: {0}")]
    IncompatibleRefinement(String),

    #[error("invalid range r = {0}: need r >= 2")]
    InvalidRange(i64),

    #[error("coefficient conditions violated: {0}")]
    CoefficientConditionsViolated(String),
}

impl Error {
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidDimension(_) => "invalid-dimension",
            Error::DimensionMismatch { .. } => "dimension-mismatch",
            Error::InvalidParameter(_) => "invalid-parameter",
            Error::GridTooCoarse { .. } => "grid-too-coarse",
            Error::StencilOutOfDomain { .. } => "stencil-out-of-domain",
            Error::DecompositionInfeasible { .. } => "decomposition-infeasible",
            Error::SearchFailed { .. } => "search-failed",
            Error::EllipticityViolation(_) => "ellipticity-violation",
            Error::InvalidSpec(_) => "invalid-spec",
            Error::RefuseToStep { .. } => "refuse-to-step",
            Error::DriftConditionViolated { .. } => "drift-condition-violated",
            Error::DivergenceDetected { .. } => "divergence-detected",
            Error::InsufficientData(_) => "insufficient-data",
            Error::MonotonicityCheckFailed { .. } => "monotonicity-check-failed",
            Error::IncompatibleRefinement(_) => "incompatible-refinement",
            Error::InvalidRange(_) => "invalid-range",
            Error::CoefficientConditionsViolated(_) => "coefficient-conditions-violated",
        }
    }

    /// Numerical failures are distinguished from input validation failures.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::DivergenceDetected { .. } | Error::MonotonicityCheckFailed { .. }
        )
    }
}
