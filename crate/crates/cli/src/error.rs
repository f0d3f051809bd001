use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Core(#[from] ccad::Error),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("ingestion error: {0}")]
    Ingest(String),

    /// A required input artifact is absent.
    #[error("{0}")]
    Missing(String),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Candle(#[from] candle_core::Error),

    #[error("npy: {0}")]
    Npy(String),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

impl PipelineError {
    /// 1 for invalid inputs or configuration, 2 for failures while running.
    pub fn exit_code(&self) -> i32 {
        use ccad::Error as E;
        match self {
            PipelineError::Config(_) | PipelineError::Ingest(_) | PipelineError::Missing(_) => 1,
            PipelineError::Core(e) => match e {
                E::Param { .. }
                | E::Shape(_)
                | E::Schedule(_)
                | E::Config(_)
                | E::UndefinedMetric(_)
                | E::BadMagic { .. }
                | E::VersionMismatch { .. }
                | E::Truncated(_)
                | E::Malformed(_) => 1,
                E::Divergence { .. } | E::Candle(_) | E::Io(_) | E::Json(_) => 2,
            },
            PipelineError::Image(_)
            | PipelineError::Io(_)
            | PipelineError::Json(_)
            | PipelineError::Candle(_)
            | PipelineError::Npy(_) => 2,
        }
    }
}
