//! Topology bridge, iterative fitting, the feedforward projector and the
//! denoising pose prior.

mod bary;
mod convert;
mod denoise;
mod fit;
mod projector;

pub use bary::{bridge, bridge_into, precompute_bary, BaryMap};
pub use convert::{bench_conversion, ConversionReport};
pub use denoise::{
    denoise, denoise_into, motion_dataset, train_denoiser, DenoiserConfig, DenoiserEpoch,
    DenoiserOutcome, DenoiserWeights, BODY_DIM,
};
pub use fit::{
    fit_bridged, fit_objective, iterative_fit, mean_vertex_error, FitConfig, FitEval, FitResult,
};
pub use projector::{
    conversion_loss, mlp_forward, prepare_input, project_forward, project_forward_with,
    stride_subsample, train_projector, Affine, ConversionSet, EpochStats, ProjectorConfig,
    ProjectorScratch, ProjectorWeights, TrainConfig, TrainOutcome,
};
