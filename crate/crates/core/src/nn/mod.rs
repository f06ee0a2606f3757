//! Small reverse-mode autodiff engine and the blocks the learned stages use.

pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tensor;

pub use gradcheck::{derivative_error, gradient_check, GradCheckReport};
pub use graph::{Bindings, Gradients, Graph, Var};
pub use layers::{
    sinusoidal_positions, FilmGenerator, GraphConv, Init, LayerNorm, Linear, MultiHeadAttention,
    TemporalResNet, TransformerEncoder,
};
pub use optim::{train, Adam, AdamConfig, TrainReport};
pub use params::ParamStore;
pub use tensor::{gemm, Scalar, Tensor};
