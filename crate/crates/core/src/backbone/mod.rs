//! The hybrid convolution/transformer network.

pub mod audit;
pub mod cond;
pub mod config;
pub mod conv;
pub mod layers;
pub mod model;
pub mod transformer;

pub use audit::{audit_gradients, ParamCheck};
pub use cond::{CondEmbedder, Conditioning};
pub use config::ModelConfig;
pub use model::{Encoded, P3d, DECODER_UNITS};
pub use transformer::{TransformerBlock, WindowAttention, WindowPlan};
