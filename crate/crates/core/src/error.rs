use std::path::PathBuf;

use crate::data::ClassId;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {}: {msg}", path.display())]
    Parse { path: PathBuf, msg: String },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("unknown class {0}")]
    UnknownClass(ClassId),

    #[error("training label {0} belongs to an unseen class")]
    UnseenTrainingLabel(ClassId),

    #[error("class {0} appears in both the seen and unseen splits")]
    OverlappingSplits(ClassId),

    #[error("duplicate class row {class} in semantic table {source_name}")]
    DuplicateClassRow { source_name: String, class: ClassId },

    #[error("embedding row count mismatch in semantic table {source_name}: expected {expected}, found {found}")]
    EmbeddingRowCount {
        source_name: String,
        expected: usize,
        found: usize,
    },

    #[error("unknown semantic source {0:?}")]
    UnknownSource(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("no unseen prototype is defined")]
    NoDefinedPrototype,

    #[error("weight vector is off the simplex (sum {sum}, min {min})")]
    OffSimplex { sum: f64, min: f64 },

    #[error("objective became non-finite and backtracking failed")]
    NonFinite,

    #[error("empty candidate set")]
    EmptyCandidates,

    #[error("degenerate assignment: every unseen class is empty")]
    DegenerateAssignment,
}

pub type Result<T> = std::result::Result<T, Error>;
