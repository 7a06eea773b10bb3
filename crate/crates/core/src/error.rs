use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("field length {found} does not match mesh node count {expected}")]
    MeshMismatch { expected: usize, found: usize },

    #[error("shifted system is singular (sigma = {sigma})")]
    Singular { sigma: f64 },

    #[error("conjugate gradient did not converge: residual {residual:.3e} after {iterations} iterations")]
    LinearSolve { residual: f64, iterations: usize },

    #[error("power iteration did not converge: residual {residual:.3e} after {iterations} iterations")]
    EigenNotConverged { residual: f64, iterations: usize },

    #[error("newton iteration failed at step {step}: increment {increment:.3e}")]
    Newton { step: usize, increment: f64 },

    #[error("trajectory diverged at t = {time}: L2 norm {norm:.3e} exceeds {threshold:.3e}")]
    Divergence { time: f64, norm: f64, threshold: f64 },

    #[error("not stabilizable at this discretization: {0}")]
    NotStabilizable(String),

    #[error("optimizer did not converge: residual {residual:.3e} after {iterations} iterations")]
    NotConverged { residual: f64, iterations: usize },

    #[error("second-order condition violated: {0}")]
    SecondOrderViolated(String),

    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    #[error("lanczos breakdown after {restarts} restarts")]
    LanczosBreakdown { restarts: usize },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("config error at {pointer}: {message}")]
    Config { pointer: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
