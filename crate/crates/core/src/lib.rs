//! Attribute-aware attentional fusion (AAI) for face verification.
//!
//! A two-branch network shares a frozen convolutional backbone between a
//! face-recognition branch and a soft-biometric branch of binary attribute
//! heads; the AAI module fuses the two branches' feature maps with channel
//! and spatial gates. Everything runs on the small tape-based autograd
//! engine in [`autograd`].

pub mod ablation;
pub mod attention;
pub mod autograd;
pub mod cli;
pub mod config;
mod conv;
pub mod datagen;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod network;
pub mod params;
pub mod tensor;
pub mod training;
pub mod weights;

pub use attention::{AaiConfig, AaiModule, AttentionWeights, FusionVariant};
pub use autograd::{Graph, Var};
pub use config::RunConfig;
pub use error::{Error, Result};
pub use network::{Branch, Network, NetworkConfig};
pub use tensor::{DType, Real, Tensor};
pub use training::{Model, Stage, TrainConfig, TrainLog};
