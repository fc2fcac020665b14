//! Small CPU tensor library with tape-based reverse-mode autodiff and the network blocks
//! used by the locomotion estimator, policy and critics.

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod nets;
pub mod optim;
pub mod params;
pub mod real;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use error::{NnError, Result};
pub use graph::{Graph, Var};
pub use nets::{Critic, CriticConfig, Estimator, EstimatorConfig, EstimatorOut, Policy, PolicyConfig};
pub use layers::{Activation, Conv2d, Gru, Init, Linear, Mlp, SelfAttention};
pub use optim::Adam;
pub use params::{ParamId, ParamStore};
pub use real::Real;
pub use tensor::Tensor;
