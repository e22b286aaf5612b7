//! Zero-shot composed image retrieval by masked image-text textual inversion.
//!
//! A frozen dual encoder, a small inversion network φ that maps image features
//! to pseudo-word embeddings, relevance-guided masking for training pairs, and
//! recall evaluation. Numeric code is generic over [`Scalar`] (`f32`/`f64`);
//! the aliases below fix the common choices.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod inversion;
pub mod masking;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod render;
pub mod scalar;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type StubBackboneF32 = backbone::StubBackbone<f32>;
pub type StubBackboneF64 = backbone::StubBackbone<f64>;
pub type ClipBackboneF32 = backbone::ClipBackbone<f32>;
pub type ClipBackboneF64 = backbone::ClipBackbone<f64>;
pub type InversionNetworkF32 = inversion::InversionNetwork<f32>;
pub type InversionNetworkF64 = inversion::InversionNetwork<f64>;
pub type CheckpointF32 = checkpoint::Checkpoint<f32>;
pub type CheckpointF64 = checkpoint::Checkpoint<f64>;
pub type GalleryIndexF32 = eval::GalleryIndex<f32>;
pub type GalleryIndexF64 = eval::GalleryIndex<f64>;
