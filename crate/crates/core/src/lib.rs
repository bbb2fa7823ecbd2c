//! Prior-anchored vectorized map decoding at desk scale.
//!
//! The crate bundles a small reverse-mode autodiff engine, synthetic BEV
//! scene generation, offline shape priors from permutation-invariant
//! K-Means, multi-scale deformable attention (vanilla and decoupled), a
//! hierarchical-query map decoder, bipartite matching with stability
//! instrumentation, training, and Chamfer-AP evaluation.

pub mod attention;
pub mod autodiff;
pub mod config;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod loss;
pub mod matching;
pub mod params;
pub mod pipeline;
pub mod prior;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;

pub use attention::Variant;
pub use config::RunConfig;
pub use decoder::{Model, PriorMode};
pub use error::{Error, Result};
pub use geometry::{BevExtent, ClassId, MapElement, Scene};
pub use prior::PriorBank;
pub use tensor::Tensor;
