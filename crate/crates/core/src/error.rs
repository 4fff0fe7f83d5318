use std::path::PathBuf;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid user-supplied configuration (unknown names, out-of-range knobs).
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller broke a documented precondition (shapes, monotonicity, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Input outside the mathematical domain of a function.
    #[error("domain error: {0}")]
    Domain(String),

    /// Non-finite values appeared in a computation that should stay finite.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("training diverged at step {step} (loss = {loss})")]
    TrainingDiverged { step: usize, loss: f64 },

    #[error("reference trajectory {trajectory} blew up at grid step {step}")]
    TrajectoryBlowup { trajectory: usize, step: usize },

    #[error("Euler sampler produced non-finite state at step {step}")]
    SamplerBlowup { step: usize },

    #[error("all shaped sharpness values are zero; raise eps_a to get a usable profile")]
    DegenerateProfile,

    #[error("field has no closed-form flow: {0}")]
    UnsupportedOracle(String),

    #[error(
        "budget {budget} exceeds the number of distinct knot times the profile can provide ({capacity})"
    )]
    QuantileCapacity { budget: usize, capacity: usize },

    /// A zero weight on an interval with positive local-error coefficient.
    #[error("infinite risk: weight {index} is zero while its coefficient is positive")]
    InfiniteRisk { index: usize },

    #[error("checkpoint {} not found; create it with `sharpeuler train --config <file>`", path.display())]
    MissingCheckpoint { path: PathBuf },

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("failed to parse config: {0}")]
    Toml(#[from] toml::de::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
