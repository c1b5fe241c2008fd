pub mod ae;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod corpus;
pub mod data;
pub mod error;
pub mod frontend;
pub mod gradcheck;
pub mod graph;
pub mod gru;
pub mod kernels;
pub mod metrics;
pub mod msr;
pub mod nn;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod signal;
pub mod temporal;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
