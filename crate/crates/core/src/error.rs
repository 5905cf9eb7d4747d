use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    #[error("state within {radius:e} of the collision at the origin")]
    CollisionProximity { radius: f64 },
    #[error("state left the forcing domain: |q| = {norm} >= rho = {rho}")]
    OutsideDomain { norm: f64, rho: f64 },
    #[error("integration failed: {0}")]
    Integration(String),
    #[error("Kepler equation did not converge for mean anomaly {0}")]
    NoConvergence(f64),
    #[error("orbit is not elliptic (energy {energy})")]
    HyperbolicOrParabolic { energy: f64 },
    #[error("orbit is rectilinear; orientation elements undefined")]
    RectilinearOrbit,
    #[error("orbit is circular; pericenter angle undefined")]
    CircularOrbit,
    #[error("state is at the collision point")]
    CollisionPoint,
    #[error("point lies on the excluded ray of the square-root branch")]
    OriginPoint,
    #[error("collision crossing is not transversal")]
    TangentialCrossing,
    #[error("point is the north pole of the sphere")]
    NorthPole,
    #[error("tau must be positive, got {0}")]
    NonpositiveTau(f64),
    #[error("sphere constraints drifted by {0:e}")]
    ConstraintDrift(f64),
    #[error("action variable vanishes; its angle is undefined")]
    DegenerateAction,
    #[error("retrograde circular orbit; Poincare variables undefined")]
    RetrogradeCircular,
    #[error("orbit-sphere point lies on the tilt axis; azimuth undefined")]
    AxisPole,
    #[error("iterate left the localization band at L = {value}")]
    LeftLocalization { value: f64 },
    #[error("Newton iteration did not converge (residual {residual:e})")]
    ShootingFailed { residual: f64 },
    #[error("continuation stuck at epsilon = {last_eps}")]
    ContinuationStuck { last_eps: f64 },
    #[error("loop is not closed (gap {0:e})")]
    OpenLoop(f64),
    #[error("numerical rank is ambiguous (gap ratio {0:e})")]
    RankAmbiguous(f64),
    #[error("trajectory left the chart: {0}")]
    ChartExit(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

pub type Result<T> = std::result::Result<T, Error>;
