//! Multimodal structural MRI + FNC classification with latent diffusion
//! augmentation, latent early fusion and cross-attention late fusion.

pub mod augmentation;
pub mod autoencoder;
pub mod classifier;
pub mod config;
pub mod container;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod graph;
pub mod lffm;
pub mod params;
pub mod pipeline;
pub mod saliency;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Autoencoder32 = autoencoder::Autoencoder<f32>;
pub type Autoencoder64 = autoencoder::Autoencoder<f64>;
pub type Denoiser32 = diffusion::Denoiser<f32>;
pub type Denoiser64 = diffusion::Denoiser<f64>;
pub type ClassifierModel32 = classifier::ClassifierModel<f32>;
pub type ClassifierModel64 = classifier::ClassifierModel<f64>;
pub type ClassAugmenter32 = augmentation::ClassAugmenter<f32>;
pub type ClassAugmenter64 = augmentation::ClassAugmenter<f64>;
