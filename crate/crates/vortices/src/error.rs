use thiserror::Error;

/// Errors shared across the crate.
#[derive(Debug, Error)]
pub enum VortexError {
    #[error("grid dimensions must be at least 4x4, got {0}x{1}")]
    NonPositiveDimension(usize, usize),

    #[error("conformal factor must be strictly positive everywhere (min {0})")]
    NonPositiveConformalFactor(f64),

    #[error("fields live on different geometries: {0}")]
    GeometryMismatch(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("moment map fails the half-space properness certificate")]
    NotProper,

    #[error("state is not a solution (residual {residual:.3e} above tolerance {tol:.3e})")]
    NotASolution { residual: f64, tol: f64 },

    #[error("phase winding undefined at this resolution near cell ({0},{1}); refine the grid")]
    AmbiguousZero(usize, usize),

    #[error("prescribed zeros closer than two lattice spacings")]
    PointsTooClose,

    #[error("line search stalled: no admissible step above the damping floor {0:.3e}")]
    LineSearchStall(f64),

    #[error("linearized system is singular ({0})")]
    SingularSystem(String),

    #[error("iteration did not converge: {0}")]
    NoConvergence(String),

    #[error("spectral probe failed: {0}")]
    SpectralFailure(String),

    #[error("eta must lie in the open unit ball, got |eta| = {0}")]
    EtaOutOfBall(f64),

    #[error("Mobius denominator 1 - <x,eta> = {0:.3e} below safe threshold")]
    DenominatorBlowup(f64),

    #[error("flow state blew up (norm {0:.3e})")]
    StepBlowup(f64),

    #[error("snapshot version or magic mismatch: {0}")]
    SnapshotVersionMismatch(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, VortexError>;
