use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("smooth region holds {available} pixels but {requested} key points were requested")]
    InsufficientSmoothRegion { available: usize, requested: usize },

    #[error("observation stack is identically zero")]
    AllZeroInput,

    #[error("light position coincides with a surface point")]
    CoincidentLightAndVertex,

    #[error("{stage} diverged: objective failed to decrease after repeated damping")]
    DivergedSolve { stage: &'static str },

    #[error("design matrix has rank {rank} < 3")]
    RankDeficient { rank: usize },

    #[error("filter region is empty")]
    EmptyRegion,

    #[error("integration mask is empty")]
    SingularSystem,

    #[error("ground-truth depth has zero range")]
    DegenerateTruth,

    #[error("depth error rose for 3 consecutive global iterations, stopped at iteration {0}")]
    /// Carries the iteration at which the run stopped.
    PipelineDiverged(usize),

    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),

    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for errors caused by malformed or inconsistent inputs, as opposed
    /// to numerical failures inside a solver.
    pub fn is_input_error(&self) -> bool {
        !matches!(
            self,
            Error::DivergedSolve { .. } | Error::PipelineDiverged(_)
        )
    }
}
