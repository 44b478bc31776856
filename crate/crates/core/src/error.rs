use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("{path}:{line}: missing required field `{field}`")]
    MissingField { path: PathBuf, line: usize, field: &'static str },

    #[error("speaker `{speaker}` appears under languages `{first}` and `{second}`")]
    Consistency { speaker: String, first: String, second: String },

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("alignment: {0}")]
    Alignment(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("loss composition for substep {substep}: {msg}")]
    Composition { substep: u8, msg: String },

    #[error("non-finite loss at step {step}, substep {substep}, component `{component}` = {value}")]
    NonFinite { step: u64, substep: u8, component: String, value: f64 },

    #[error("{path}: {source}")]
    File { path: PathBuf, source: std::io::Error },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("wav: {0}")]
    Wav(#[from] hound::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) trait IoContext<T> {
    fn at(self, path: &std::path::Path) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: &std::path::Path) -> Result<T> {
        self.map_err(|source| Error::File { path: path.to_path_buf(), source })
    }
}
