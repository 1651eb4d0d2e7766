//! Noise schedule, conditional denoiser, objective and DDIM sampler.

mod model;
mod schedule;
mod unet;

pub use model::{
    ddim_sample, initial_noise, train_diffusion, training_loss, ConditionalDenoiser, Conditioning,
    Denoiser, DiffusionMeta, DiffusionTrainOptions, DiffusionTrainReport, TrainingSet,
    CHECKPOINT_KIND,
};
pub use schedule::{
    ddim_step, ddim_step_tensor, ddim_update, make_schedule, q_sample, q_sample_tensor,
    q_sample_with, NoiseSchedule,
};
pub use unet::{timestep_embedding, UNet};
