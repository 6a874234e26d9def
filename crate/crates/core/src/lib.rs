//! Event-camera object detection built on learnable heat conduction.
//!
//! Event frames are treated as initial temperature fields; a backbone of
//! heat-conduction operators (spectral multipliers under DCT/DFT/Haar
//! transforms, mixed per sample by a learned router) evolves them for a
//! fixed horizon, and a small query-selection head decodes boxes. Everything
//! runs on a self-contained reverse-mode tensor engine at 32- or 64-bit
//! precision.

pub mod backbone;
pub mod checks;
pub mod config;
pub mod detect;
pub mod error;
pub mod model;
pub mod optim;
pub mod pgm;
pub mod events;
pub mod heat;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod transforms;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{ComplexPair, Parameter, Tensor};
