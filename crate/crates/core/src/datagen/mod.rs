//! Pseudo-spectral simulation of periodic 3-D PDE families for training data.

mod dataset;
pub mod etdrk;
mod family;
pub mod init;
pub mod spectral;

pub use dataset::{
    read_collection, read_dataset, simulate, simulate_from, write_dataset, Dataset, DatasetManifest, SimConfig,
    MANIFEST,
};
pub use etdrk::{phi1, phi2, EtdOrder, EtdStepper, SpecState};
pub use family::{Family, GsVariant, ParamRange, PdeSpec, Stepping, GS_DIFFUSIVITY};
pub use init::{init_diffused, init_fourier, init_grf, init_gs_blobs, Blobs, Initializer};
pub use spectral::{Grid, C64};
