use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("invalid track: {0}")]
    Track(String),
    #[error("unknown track `{0}`")]
    UnknownTrack(String),
    #[error("invalid dataset: {0}")]
    Dataset(String),
    #[error("untrainable data: {0}")]
    Untrainable(String),
    #[error("training diverged at iteration {iteration}: {detail}")]
    Diverged { iteration: usize, detail: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("observation shape {actual:?} does not match network input {expected:?}")]
    ObservationShape { expected: Vec<usize>, actual: Vec<usize> },
    #[error(transparent)]
    Nn(#[from] steer_nn::NnError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl CoreError {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        CoreError::Io {
            context: context.into(),
            source,
        }
    }
}
