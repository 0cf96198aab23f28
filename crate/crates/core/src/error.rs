use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown benchmark `{0}`")]
    UnknownBenchmark(String),
    #[error("unstable discretization: {0}")]
    UnstableDiscretization(String),
    #[error("invalid stencil spec: {0}")]
    InvalidSpec(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("all-zero input has no exponent range")]
    AllZeroInput,
    #[error("time step {t} outside the table range 0..={tmax}")]
    TstepOutOfRange { t: usize, tmax: usize },
    #[error("exponent width {0} was not profiled")]
    ExponentRangeUnprofiled(u32),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("coefficient file format mismatch: {0}")]
    FormatVersionMismatch(String),
    #[error("coefficient file belongs to a different stencil")]
    SpecHashMismatch,
    #[error("protected region is empty")]
    EmptyProtectedRegion,
    #[error("detector position {0:?} is too close to the boundary")]
    PositionTooCloseToBoundary(Vec<i64>),
    #[error("check at time {now} but detector targets time {target}")]
    TimeMismatch { now: u64, target: u64 },
    #[error("coefficient row {0} is missing")]
    TstepRowMissing(usize),
    #[error("rho {rho} must exceed T/2 (T = {t})")]
    RhoTooSmall { rho: usize, t: usize },
    #[error("unsupported coverage")]
    UnsupportedCoverage,
    #[error("no feasible detector configuration: {0}")]
    InfeasibleConfig(String),
    #[error("location out of range: {0}")]
    LocationOutOfRange(String),
    #[error("illegal tiling: {0}")]
    IllegalTiling(String),
    #[error("malformed input: {0}")]
    MalformedInput(String),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
