//! Progressive alignment-free video dehazing: two fusion stages sharing
//! parameters, a refinement network, a synthetic haze engine, losses,
//! training and PSNR/SSIM evaluation.

pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod frame;
pub mod fusion_net;
pub mod haze_model;
pub mod kernels;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod refine_net;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
