//! Crate error type. Engine-internal contract violations panic; everything
//! user- or file-facing returns one of these.

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("data load error: {0}")]
    DataLoad(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("stage '{stage}' failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Wraps the error with the pipeline stage it surfaced in.
    pub fn in_stage(self, stage: &'static str) -> Error {
        Error::Stage { stage, source: Box::new(self) }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
