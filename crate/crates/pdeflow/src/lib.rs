//! Physics-constrained fine-tuning of flow-matching generative models on
//! PDE data.
//!
//! The crate covers the full pipeline at desk scale: dataset generation
//! (Darcy flow, acoustic waves), flow-matching pre-training, an inverse
//! parameter predictor, reward fine-tuning by adjoint matching on the
//! joint state/parameter evolution against weak-form PDE residuals, and
//! evaluation utilities (guidance, super-resolution, distribution
//! statistics).

pub mod error;
pub mod finetune;
pub mod flow;
pub mod grid;
pub mod inference;
pub mod model;
pub mod oracles;
pub mod pde;
pub mod weakform;
pub mod rng;
pub mod store;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
