//! A small reverse-mode autodiff engine over `f64` vectors and matrices,
//! with the recurrent layers and optimizer the scorers are built from.

mod graph;
mod layers;
mod optim;
mod params;

pub use graph::{cosine, softmax as graph_softmax, Gradients, Graph, NodeId, Tensor};
pub use layers::{dropout_mask, BiLstm, Linear, Lstm};
pub use optim::Adam;
pub use params::{ParamId, ParamStore};
