use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at byte {pos}: {msg}")]
    Parse { pos: usize, msg: String },

    #[error("unknown identifier `{name}` at byte {pos}")]
    UnknownIdentifier { name: String, pos: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("point is not on the double manifold: residual {residual:.3e} exceeds {tol:.3e}")]
    NotOnSigma { residual: f64, tol: f64 },

    #[error("singular system: {0}")]
    Singular(String),

    #[error("degenerate configuration: {0}")]
    Degenerate(String),

    #[error("not a transition point: {0}")]
    NotTransitionPoint(String),

    #[error("declared rank {declared} does not match computed rank {computed}")]
    RankMismatch { declared: usize, computed: usize },

    #[error("eigenvalue iteration failed to converge after {iterations} iterations")]
    EigenNonConvergence { iterations: usize },

    #[error("step size underflow at s = {s:.6e}")]
    StepUnderflow { s: f64 },

    #[error("invariant violated: {0}")]
    Inconsistent(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("no real root: {0}")]
    NoRealRoot(String),

    #[error("nonnegativity of Q failed at penalty weight {lam}: min sampled value {min_q:.3e}")]
    QNegative { lam: f64, min_q: f64 },

    #[error("seeding failed: {0}")]
    Seed(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
