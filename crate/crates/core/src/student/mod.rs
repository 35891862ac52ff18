//! The distilled denoiser: ring network, EDM objective, Adam, training.

pub mod adam;
pub mod edm;
pub mod net;
pub mod train;

pub use adam::{AdamConfig, AdamState};
pub use edm::{
    edm_loss, edm_loss_only, loss_weight, per_sample_losses, precondition, sample_sigma,
    student_forward, student_inputs, Precondition, SigmaSpec,
};
pub use net::{backward, forward, forward_cached, Arch, Layout, NetParams};
pub use train::{
    finetune, load_checkpoint, run_training, save_checkpoint, train, Checkpoint, CurvePoint,
    SamplePool, TrainConfig, TrainResult,
};
