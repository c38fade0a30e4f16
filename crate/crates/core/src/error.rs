use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("syntax error at {line}:{column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("invalid query: {0}")]
    InvalidQuery(String),

    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    EdgeList {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("relation `{0}` is not bound in the database")]
    MissingRelation(String),

    #[error("invalid schema: {0}")]
    Schema(String),

    #[error("attribute order {0}")]
    Order(String),

    #[error("malformed block payload: {0}")]
    Wire(String),

    #[error("decomposition limits exceeded: {0}")]
    Limits(String),

    #[error("no feasible share vector: {0}")]
    Infeasible(String),

    #[error("missing statistics: {0}")]
    Stats(String),

    #[error("cluster error: {0}")]
    Cluster(String),

    #[error("worker {worker} exceeded its memory budget of {budget} tuples ({pulled} pulled for {relations:?})")]
    MemoryBudget {
        worker: usize,
        budget: u64,
        pulled: u64,
        relations: Vec<String>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
