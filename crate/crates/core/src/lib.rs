//! Hybrid convolution/transformer surrogate models for 3-D PDE fields.

pub mod backbone;
pub mod context;
pub mod datagen;
pub mod error;
pub mod evalharness;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
