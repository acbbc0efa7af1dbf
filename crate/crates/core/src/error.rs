use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("quaternion norm {0} is not unit")]
    NonUnitQuaternion(f64),
    #[error("non-monotone timestamp: {next} does not follow {prev}")]
    NonMonotoneStamp { prev: f64, next: f64 },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("matrix is not positive semidefinite: {0}")]
    NotPsd(String),
    #[error("cannot marginalize {0}")]
    InvalidMarginalization(String),
    #[error("correction contains non-finite entries")]
    NonFiniteCorrection,
    #[error("no IMU samples cover the interval")]
    EmptySamples,
    #[error("point depth {0} is below the cheirality floor")]
    Cheirality(f64),
    #[error("track rejected: {0}")]
    TrackRejected(String),
    #[error("echo requires two distinct anchors, got {0} twice")]
    SameAnchor(u32),
    #[error("interpolation pair mixes anchors {0} and {1}")]
    MixedAnchors(u32, u32),
    #[error("invalid interpolation interval [{0}, {1}]")]
    InvalidInterval(f64, f64),
    #[error("no anchors in state")]
    NoAnchors,
    #[error("ill-conditioned linear system (condition number {0:e})")]
    IllConditioned(f64),
    #[error("anchor initialization failed: {0}")]
    InitFailed(String),
    #[error("first estimate already recorded for {0}")]
    FejOverwrite(String),
    #[error("no first estimate recorded for {0}")]
    FejMissing(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable identifier used in machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::NonUnitQuaternion(_) => "non_unit_quaternion",
            Error::NonMonotoneStamp { .. } => "non_monotone_stamp",
            Error::Dimension(_) => "dimension",
            Error::NotPsd(_) => "not_psd",
            Error::InvalidMarginalization(_) => "invalid_marginalization",
            Error::NonFiniteCorrection => "non_finite_correction",
            Error::EmptySamples => "empty_samples",
            Error::Cheirality(_) => "cheirality",
            Error::TrackRejected(_) => "track_rejected",
            Error::SameAnchor(_) => "same_anchor",
            Error::MixedAnchors(..) => "mixed_anchors",
            Error::InvalidInterval(..) => "invalid_interval",
            Error::NoAnchors => "no_anchors",
            Error::IllConditioned(_) => "ill_conditioned",
            Error::InitFailed(_) => "init_failed",
            Error::FejOverwrite(_) => "fej_overwrite",
            Error::FejMissing(_) => "fej_missing",
            Error::Degenerate(_) => "degenerate",
            Error::Config(_) => "config",
            Error::Parse(_) => "parse",
            Error::Io(_) => "io",
        }
    }
}
