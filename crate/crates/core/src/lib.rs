pub mod attention;
pub mod backbone;
pub mod conv;
pub mod data;
pub mod error;
pub mod eval;
pub mod explain;
pub mod gradcheck;
pub mod graph;
pub mod imageio;
mod linalg;
pub mod mixer;
pub mod model;
pub mod params;
pub mod tensor;
pub mod train;

pub use conv::{Conv2dOptions, Padding};
pub use error::{Error, Result};
pub use graph::{Binary, Graph, NodeId, Unary};
pub use model::{ModelConfig, ForwardPass};
pub use params::ModelParams;
pub use tensor::Tensor;
