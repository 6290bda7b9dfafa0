//! Tensors, reverse-mode differentiation and the masked-autoencoder model.

mod checkpoint;
mod gradcheck;
mod graph;
mod model;
mod optim;
mod params;
mod tensor;
mod train;

pub use checkpoint::{Checkpoint, MAGIC as CHECKPOINT_MAGIC, VERSION as CHECKPOINT_VERSION};
pub use gradcheck::{central_difference, grad_check, rel_err, GradCheckReport, Probe};
pub use graph::{Grads, Graph, NodeId};
pub use model::{
    positional_encoding, Encoded, MaeModel, ModelConfig, PackInput, Preset, Reconstruction, TokenStream,
    CLS_POSITION, SR_POSITION,
};
pub use optim::{AdamW, AdamWConfig, AdamWState};
pub use params::{normal, xavier, ParamStore};
pub use tensor::Tensor;
pub use train::{mae_eval, mae_grads, pretrain_step, StepOutcome};
