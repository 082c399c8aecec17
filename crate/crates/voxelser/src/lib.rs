//! Serialized voxel attention at desk scale: space-filling-curve serialization
//! with padding-free grouping, learnable shift selection via straight-through
//! Gumbel-Softmax, center-relative positional encoding, convolution-modulated
//! layer normalization, and a toy trainer over synthetic scenes.

pub mod asa;
pub mod bench;
pub mod block;
pub mod checks;
pub mod cli;
pub mod crpe;
pub mod error;
pub mod grid;
pub mod losses;
pub mod num;
pub mod sfc;
pub mod synth;

pub use error::{Error, Result};
