use thiserror::Error;

/// Failures raised by the reconstruction pipeline.
///
/// Numerical failures carry the arclength (or travel time) at which they
/// happened so that callers can report how far a computation got.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("point {point:?} lies outside the chart domain")]
    Domain { point: Vec<f64> },
    #[error("metric is degenerate at {point:?} (min eigenvalue {min_eigenvalue:e})")]
    DegenerateMetric { point: Vec<f64>, min_eigenvalue: f64 },
    #[error("zero tangent vector")]
    ZeroVector,
    #[error("direction is not unit length (|eta|_g = {norm})")]
    NotUnit { norm: f64 },
    #[error("integrator failed to meet tolerance at r = {r}")]
    Step { r: f64 },
    #[error("parallel frame became singular at r = {r}")]
    SingularFrame { r: f64 },
    #[error("Fermi map is not injective on the requested window")]
    Injectivity,
    #[error("Newton inversion of the Fermi map did not converge")]
    NoConvergence,
    #[error("conjugate point: Jacobi matrix singular at r = {r}")]
    ConjugatePoint { r: f64 },
    #[error("solution blew up at r = {r}")]
    BlowUp { r: f64 },
    #[error("shape operator not invertible at t = {t}")]
    SingularShape { t: f64 },
    #[error("third t-derivative failed the smoothness diagnostic at t = {t} (residual {residual:e}, limit {limit:e})")]
    Noise { t: f64, residual: f64, limit: f64 },
    #[error("evaluation at r = {r} lies outside the usable t-window")]
    OutOfWindow { r: f64 },
    #[error("bad step-bound input: {0}")]
    BadBound(String),
    #[error("usable data window exhausted at r = {r}")]
    WindowExhausted { r: f64 },
    #[error("recovered Jacobi matrix is singular (masked) at r = {r}")]
    ConjugateMask { r: f64 },
    #[error("grids of the compared charts differ: {0}")]
    GridMismatch(String),
    #[error("no sampled endpoint of the surface lands in the region")]
    EmptySurface,
    #[error("no chain of surfaces connects the two points")]
    Disconnected,
    #[error("nearest sample is {distance} away, beyond the snap radius {radius}")]
    Snap { distance: f64, radius: f64 },
    #[error("landmarks give degenerate coordinates (condition number {condition:e})")]
    DegenerateLandmarks { condition: f64 },
    #[error("least-squares system is ill-conditioned: {0}")]
    IllConditioned(String),
    #[error("need at least {needed} samples near the base point, found {found}")]
    InsufficientSamples { needed: usize, found: usize },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("{0}")]
    Io(String),
    #[error("{file}: line {line}: {message}")]
    Parse { file: String, line: usize, message: String },
}

impl Error {
    /// Arclength reached before a numerical failure, when one is attached.
    pub fn reached(&self) -> Option<f64> {
        match self {
            Error::Step { r }
            | Error::SingularFrame { r }
            | Error::ConjugatePoint { r }
            | Error::ConjugateMask { r }
            | Error::BlowUp { r }
            | Error::OutOfWindow { r }
            | Error::WindowExhausted { r } => Some(*r),
            _ => None,
        }
    }

    /// True for failures caused by bad inputs rather than numerics.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Invalid(_) | Error::Io(_) | Error::Parse { .. } | Error::GridMismatch(_)
        )
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
