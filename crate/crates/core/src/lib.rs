//! Unpaired image-to-image translation with spectral-normalized residual
//! generators, entropy-selected contrastive patches and a dual contrastive
//! regularizer.

pub mod blocks;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod discriminator;
pub mod error;
pub mod features;
pub mod generator;
pub mod gradcheck;
pub mod graph;
pub mod image_batch;
pub mod kernels;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod par;
pub mod params;
pub mod qs_attn;
pub mod rng;
pub mod selfcheck;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
