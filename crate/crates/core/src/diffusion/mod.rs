//! Pixel-space conditional diffusion decoder: linear noise schedule, a small
//! UNet with semantic cross-attention, edge/color control branches injected at
//! three decoder sites, noise-prediction training and a deterministic DDIM sampler.

pub mod model;
pub mod schedule;
pub mod unet;

pub use model::{
    cond_inputs, draw_noise, image_tensor, initial_noise, tensor_images, train_denoiser, training_samples, DiffusionArch,
    DiffusionConfig, DiffusionManifest, DiffusionModel, NoiseDraw, RefineManifest, DIFFUSION_PREFIX, REFINE_PREFIX,
};
pub use schedule::{NoiseSchedule, BETA_END, BETA_START, DDIM_STEPS, T_STEPS};
pub use unet::{site_shape, timestep_embedding, CondFeatures, CondVars, ControlBranch, Denoiser, Fusion, FusionMode, SITES, WIDTHS};
