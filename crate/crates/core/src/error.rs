use thiserror::Error;

/// Unified error type for the whole pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("unknown layer kind `{0}`")]
    UnknownLayerKind(String),

    #[error("layer kind `{kind}` is missing shape parameter `{param}`")]
    MissingShapeParam { kind: &'static str, param: &'static str },

    #[error("layer kind `{kind}` does not accept parameter `{param}`")]
    UnexpectedShapeParam { kind: &'static str, param: String },

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("unknown preset `{0}`")]
    UnknownPreset(String),

    #[error("unknown task `{0}`")]
    UnknownTask(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("tokenizer error: {0}")]
    Tokenizer(String),

    #[error("malformed data: {0}")]
    MalformedData(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("reproduction target `{target}` failed: {failures} of {cells} cells out of tolerance")]
    ReproductionFailed { target: String, failures: usize, cells: usize },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
