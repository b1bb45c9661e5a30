//! Multimodal emotion recognition in conversations.
//!
//! The pipeline embeds per-utterance text, audio and visual features
//! together with speaker and position information, encodes each modality
//! with a bank of bidirectional GRU experts under statistics-based dynamic
//! routing, fuses modalities with hierarchical cross-attention, and trains
//! the resulting multimodal student under the guidance of a frozen
//! text-only teacher.
//!
//! Everything runs on a small reverse-mode autodiff engine over `f64`
//! ([`tensor`]), so every gradient can be checked against finite
//! differences.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod embed;
pub mod error;
pub mod hcmf;
pub mod ikd;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod seeds;
pub mod sdmoe;
pub mod tensor;
pub mod train;

pub use config::ModelConfig;
pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
