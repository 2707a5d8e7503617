//! Tensors, automatic differentiation, neural-network primitives and spectral transforms.

pub mod blob;
pub mod fft;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod params;
pub mod tensor;

pub use fft::{Fft3, SpectralField};
pub use graph::{attention, concat, mse, pixel_shuffle_3d, pixel_unshuffle_3d, Gradients, Graph, PadMode, Var};
pub use params::{Init, ParamId, ParamStore, Session};
pub use tensor::{s, DType, Scalar, Tensor};
