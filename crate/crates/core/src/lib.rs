//! Desk-scale laboratory for view-agnostic dense contrastive representation learning.
pub mod config;
pub mod contrast;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod eval;
pub mod image_io;
pub mod synth;
pub mod tensor;
pub mod trainer;
pub mod views;
pub mod viz;

pub use error::{Error, Result};
