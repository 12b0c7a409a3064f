use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("domain error in {op}: entry ({row}, {col}) = {value}")]
    Domain {
        op: &'static str,
        row: usize,
        col: usize,
        value: f64,
    },

    #[error("backward requires a 1x1 root, got {rows}x{cols}")]
    NonScalarRoot { rows: usize, cols: usize },

    #[error("backward already ran on this tape; call reset_grads first")]
    DoubleBackward,

    #[error("empty index set passed to {0}")]
    EmptyIndexSet(&'static str),

    #[error("index {index} out of range for {len} rows")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("edge ({0}, {1}) is a self-loop")]
    SelfLoop(usize, usize),

    #[error("edge ({u}, {v}) has an endpoint outside 0..{node_count}")]
    EdgeOutOfRange { u: usize, v: usize, node_count: usize },

    #[error("feature matrix has {rows} rows but graph has {node_count} nodes")]
    FeatureRows { rows: usize, node_count: usize },

    #[error("missing mandatory file {}", .0.display())]
    MissingFile(PathBuf),

    #[error("{}:{line}: expected an integer, found {token:?}", file.display())]
    NotAnInteger { file: PathBuf, line: usize, token: String },

    #[error("{}:{line}: expected a real number, found {token:?}", file.display())]
    NotAReal { file: PathBuf, line: usize, token: String },

    #[error("node {node} assigned to two graphs ({first} and {second})")]
    NodeInTwoGraphs { node: usize, first: usize, second: usize },

    #[error("edge crossing graph boundary: ({u}, {v}) joins graphs {gu} and {gv}")]
    EdgeCrossesGraphs { u: usize, v: usize, gu: usize, gv: usize },

    #[error("malformed dataset: {0}")]
    Malformed(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("graph has no nodes")]
    EmptyGraph,

    #[error("feature dimension mismatch: {left} vs {right}")]
    FeatureDim { left: usize, right: usize },

    #[error("single-class dataset; anomaly split needs at least two classes")]
    SingleClass,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("NaN loss at iteration {iteration}: {detail}")]
    NanLoss { iteration: usize, detail: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}
