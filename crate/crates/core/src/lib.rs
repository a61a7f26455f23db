//! Coded-aperture snapshot spectral imaging (CASSI) toolkit.
//!
//! The crate holds the sensing model, a half-quadratic-splitting unfolding
//! reconstructor with a selective state-space denoiser, the small
//! reverse-mode autodiff engine it trains with, image quality metrics and
//! the on-disk formats used by the `cassi` command-line tool.

pub mod autodiff;
pub mod cassi;
pub mod denoiser;
pub mod error;
pub mod gradcheck;
pub mod hqs;
pub mod io;
pub mod masked;
pub mod metrics;
pub mod scan;
pub mod ssm;
pub mod tensor;
pub mod weights;

pub use autodiff::{ElementwiseKind, Gradients, Padding, Tape, Var};
pub use cassi::{
    add_shot_noise, adjoint_project, forward_project, phi_diag, shift_back, HsiCube, Measurement, SensingOperator,
};
pub use denoiser::{Denoiser, NetConfig};
pub use error::{Error, Result};
pub use hqs::{data_step, estimate_stage_params, StageParams, UnfoldConfig, UnfoldingModel};
pub use masked::{generate_mask, FeatureMask, TrainConfig};
pub use metrics::{evaluate, psnr, ssim, MetricReport};
pub use scan::{CubeSpec, OrderCache, OrderDescriptor, ScanOrder};
pub use ssm::{discretize_zoh, selective_scan, SsmParams};
pub use tensor::Tensor;
pub use weights::ModelWeights;
