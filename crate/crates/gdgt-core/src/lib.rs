//! Distortion-guided transformer for omnidirectional image super-resolution.
//!
//! The crate is organized around a small reverse-mode tensor engine
//! ([`tape`]), equirectangular projection geometry ([`geometry`]), the
//! attention blocks and guidance generator that consume the distortion map,
//! and a desk-scale training loop with deterministic checkpointing.

pub mod attention;
pub mod metrics;
pub mod model;
pub mod checkpoint;
pub mod dfa;
pub mod dgg;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod infer;
pub mod kernels;
pub mod params;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod training;
pub mod windowing;

pub use attention::{DdsaConfig, Ddsa, Dmrsa, RwinAttention};
pub use dfa::Dfa;
pub use dgg::Dgg;
pub use error::{Error, Result};
pub use geometry::{distortion_map, DistortionMap};
pub use model::{Gdgt, ModelConfig};
pub use params::{Binding, ParamBuilder, ParamId, ParamStore, Parameter};
pub use scalar::Scalar;
pub use tape::{PadMode, Tape, Var};
pub use tensor::Tensor;
pub use training::TrainConfig;
pub use windowing::{HeadSplit, Orientation, WindowSpec};
