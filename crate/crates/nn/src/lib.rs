//! Minimal CPU neural-network toolkit: dense tensors, a reverse-mode tape,
//! convolution/linear/LSTM layers, Adam and JSON checkpoints.

pub mod checkpoint;
pub mod graph;
pub mod layers;
pub mod ops;
pub mod optim;
pub mod params;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use graph::{Gradients, Graph, Var};
pub use layers::{Conv2d, Linear, Lstm};
pub use ops::ConvCfg;
pub use optim::Adam;
pub use params::{init_uniform, ParamId, ParamStore};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("parameter `{0}` missing from checkpoint")]
    MissingParam(String),
    #[error("parameter `{name}` has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint format version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint holds a `{found}` model, expected `{expected}`")]
    Kind { found: String, expected: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
