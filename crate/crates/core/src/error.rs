use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid multi-word expression {0:?}: needs at least two non-empty words")]
    InvalidMwe(String),
    #[error("token name {token_name:?} for {surface:?} is already taken by {existing:?}")]
    NameCollision {
        token_name: String,
        surface: String,
        existing: String,
    },
    #[error("unsupported language code {0:?}")]
    UnsupportedLanguage(String),
    #[error("no token id assigned to {0:?}")]
    MissingTokenId(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at {path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("annotation references unknown record {source_file}:{line_number}")]
    DanglingAnnotation {
        source_file: String,
        line_number: usize,
    },
    #[error("context set for {0:?} still contains proper_noun or misuse labels")]
    NotCurated(String),
    #[error("{token_name:?} not found as a single token in context {text:?}")]
    MatchLost { token_name: String, text: String },
    #[error("{0:?} is not a single token of the encoder vocabulary")]
    NotMimickable(String),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },
    #[error("token {0:?} is already part of the vocabulary")]
    AlreadyInjected(String),
    #[error("token {0:?} is not registered")]
    UnregisteredMwe(String),
    #[error("cosine similarity is undefined for a zero vector")]
    DegenerateVector,
    #[error("idiom STS data is not allowed in the pre-train setting ({0} idiom pairs)")]
    SettingViolation(usize),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("correlation is undefined for a constant list")]
    UndefinedCorrelation,
    #[error("no idiom assigned to idiom-subset pair {0}")]
    MissingGrouping(usize),
    #[error("constituent word {0:?} never occurs in the corpus")]
    DivisionContext(String),
    #[error("{0}")]
    Format(String),
    #[error("stage {stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Tags an error with the pipeline stage it came from.
    pub fn in_stage(self, stage: impl Into<String>) -> Self {
        Error::Stage {
            stage: stage.into(),
            source: Box::new(self),
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

pub(crate) trait StageExt<T> {
    fn stage(self, stage: &str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &str) -> Result<T> {
        self.map_err(|e| e.in_stage(stage))
    }
}
