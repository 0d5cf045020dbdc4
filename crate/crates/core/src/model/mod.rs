//! Trainable encoder-decoder: tokenizer, autograd tape, transformer,
//! optimizers and checkpoints.

pub mod checkpoint;
pub mod graph;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod transformer;
pub mod vocab;

pub use checkpoint::Checkpoint;
pub use graph::{Gradients, Graph, Var};
pub use optim::{adam_step, sgd_step, AdamConfig, AdamState};
pub use params::ParamSet;
pub use tensor::Tensor;
pub use transformer::{EncodedSequence, Model, ModelConfig};
pub use vocab::Vocabulary;
