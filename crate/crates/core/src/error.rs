use std::fmt;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// One failed invariant found by [`crate::types::validate_sample`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    ImageShape { expected: (usize, usize), found: (usize, usize) },
    ImageRange,
    BoxNotPositive { index: usize },
    BoxNegativeOrigin { index: usize },
    BoxOutOfBounds { index: usize },
    ClassOutOfRange { index: usize, class: usize, max: usize },
    DomainOutOfRange { domain: usize, count: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::ImageShape { expected, found } => write!(
                f,
                "image is {}x{}, schema expects {}x{}",
                found.0, found.1, expected.0, expected.1
            ),
            Violation::ImageRange => write!(f, "image values outside [0, 1]"),
            Violation::BoxNotPositive { index } => write!(f, "box {index} has non-positive size"),
            Violation::BoxNegativeOrigin { index } => write!(f, "box {index} has negative origin"),
            Violation::BoxOutOfBounds { index } => write!(f, "box {index} exceeds image bounds"),
            Violation::ClassOutOfRange { index, class, max } => {
                write!(f, "box {index} has class {class}, expected 1..={max}")
            }
            Violation::DomainOutOfRange { domain, count } => {
                write!(f, "domain {domain} out of range for {count} domains")
            }
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain index {index} out of range for {count} domains")]
    DomainOutOfRange { index: usize, count: usize },

    #[error("sample `{id}` is invalid: {}", join(.violations))]
    InvalidSample { id: String, violations: Vec<Violation> },

    #[error("invalid toy dataset spec: {0}")]
    InvalidSpec(String),

    #[error("invalid training config: {0}")]
    InvalidConfig(String),

    #[error("{file}{}: {message}", .record.map(|r| format!(" (record {r})")).unwrap_or_default())]
    Schema {
        file: PathBuf,
        record: Option<usize>,
        message: String,
    },

    #[error("io error at {}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {}: {source}", .path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("json error at {}: {source}", .path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite loss component `{component}`{context}")]
    NonFinite { component: String, context: String },

    #[error("{0}")]
    Empty(&'static str),

    #[error("no classifier for domain {domain} (bank holds {available})")]
    MissingClassifier { domain: usize, available: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("not a probability distribution: {0}")]
    NotDistribution(String),

    #[error("absolute continuity violated: q[{index}] = 0 while p[{index}] > 0")]
    AbsoluteContinuity { index: usize },

    #[error("class marginal is not uniform (max deviation {max_deviation:.3e})")]
    NonUniformMarginal { max_deviation: f64 },

    #[error("domain generalisation needs at least 2 source domains, dataset has {0}")]
    TooFewDomains(usize),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad input rather than a failure while running.
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            Error::Io { .. } | Error::NonFinite { .. } | Error::Image { .. }
        )
    }
}

fn join(v: &[Violation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}
