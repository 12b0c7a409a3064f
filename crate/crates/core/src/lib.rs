pub mod data;
pub mod detector;
pub mod diffmat;
pub mod energy;
pub mod epo;
pub mod error;
pub mod eval;
pub mod gnn;
pub mod graph;
pub mod linalg;
pub mod prompt;
pub mod verify;

pub use error::{Error, Result};
pub use graph::{Dataset, DistLabel, Graph, LabeledGraph};
pub use linalg::Matrix;
