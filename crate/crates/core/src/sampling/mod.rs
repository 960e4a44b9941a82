//! Few-step sampling, guidance, and the two denoising paths.

pub mod ancestral;
pub mod cfg;
pub mod denoiser;
pub mod score;

pub use ancestral::{predictor_step, sample, SampleRequest, Sampled};
pub use cfg::{cfg_combine, cfg_scalar};
pub use denoiser::{distill_targets, Denoiser, DenoiserConfig, DenoiserTrainer};
pub use score::{nll_gradient, score_denoise, CovarianceMode, ScoreConfig, ScoreDenoised};
