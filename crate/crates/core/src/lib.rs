//! Mesh-regression transformer: jointly regresses 3D joints and mesh vertices
//! from a global image feature and a template mesh.

pub mod attention_map;
pub mod autodiff;
pub mod error;
pub mod gradsuite;
pub mod losses;
pub mod mesh;
pub mod metrics;
pub mod model;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{MetroError, Result};
pub use tensor::Tensor;
