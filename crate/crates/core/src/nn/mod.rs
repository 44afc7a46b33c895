//! Layer engine: tensors flow through [`Model`]s built from [`LayerSpec`]s,
//! with exact reverse-mode gradients and Adam updates.

mod adam;
pub(crate) mod conv;
mod init;
mod layer;
mod model;

pub use adam::{adam_step, lr_at, AdamConfig, AdamState, TrainSchedule};
pub use init::{sample_noise, xavier_init, LayerInit, NOISE_DIM};
pub use layer::{LayerSpec, Mode, BATCHNORM_EPS, BATCHNORM_MOMENTUM};
pub use model::{build_model, Backward, Model, ModelSpec, OutputGrad, ParamSlot, Role, Trace};
