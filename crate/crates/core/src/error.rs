use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the pipeline can report. The variant is the error category;
/// the CLI maps categories onto exit codes.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape: {0}")]
    Shape(String),

    #[error("parameter: {0}")]
    Param(String),

    #[error("statistics: {0}")]
    Stats(String),

    #[error("usage: {0}")]
    Usage(String),

    #[error("config: {0}")]
    Config(String),

    #[error("data: {0}")]
    Data(String),

    #[error("label: {0}")]
    Label(String),

    #[error("parse: line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("decode: {0}")]
    Decode(String),

    #[error("ontology: line {line}: {kind}: {msg}")]
    OntologyParse {
        line: usize,
        kind: OntologyErrorKind,
        msg: String,
    },

    #[error("ontology: {0}")]
    Ontology(String),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(CheckpointFault),

    #[error("io: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OntologyErrorKind {
    Malformed,
    UndeclaredConcept,
    Cycle,
    Duplicate,
}

impl std::fmt::Display for OntologyErrorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OntologyErrorKind::Malformed => "malformed line",
            OntologyErrorKind::UndeclaredConcept => "undeclared concept",
            OntologyErrorKind::Cycle => "is-a cycle",
            OntologyErrorKind::Duplicate => "duplicate declaration",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CheckpointFault {
    BadMagic,
    Truncated,
    ChecksumMismatch { stored: u64, computed: u64 },
    Malformed(String),
}

impl std::fmt::Display for CheckpointFault {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CheckpointFault::BadMagic => f.write_str("bad magic (expected \"PNEU1\")"),
            CheckpointFault::Truncated => f.write_str("truncated file"),
            CheckpointFault::ChecksumMismatch { stored, computed } => write!(
                f,
                "checksum mismatch (stored {stored:#018x}, computed {computed:#018x})"
            ),
            CheckpointFault::Malformed(msg) => write!(f, "malformed body: {msg}"),
        }
    }
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this category: 2 usage/data, 3 corrupt model, 4 io.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::CorruptCheckpoint(_) => 3,
            Error::Io { .. } => 4,
            _ => 2,
        }
    }
}
