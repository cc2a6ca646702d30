//! Feed-forward network engine with reverse-mode gradients and split execution.

pub mod checkpoint;
mod layer;
mod loss;
mod network;
mod params;
mod tensor;

pub use layer::{sigmoid, LayerSpec};
pub use loss::{mean_squared_error, softmax_cross_entropy};
pub use network::{NetworkSpec, SplitModelSpec, Tape};
pub use params::{average_parameters, init_parameters, sgd_step, LayerParams, ParameterSet};
pub use tensor::Tensor;
