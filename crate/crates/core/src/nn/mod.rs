//! Minimal neural-network building blocks on top of `tch` tensors.

pub mod adam;
pub mod attention;
pub mod checkpoint;
pub mod layers;
pub mod params;
pub mod spectral;

pub use adam::{Adam, AdamConfig};
pub use attention::SelfAttention;
pub use checkpoint::Checkpoint;
pub use layers::{Conv2d, ConvTranspose2d, GroupNorm, LayerBuilder, Linear};
pub use params::{Init, ParamStore};
pub use spectral::{spectral_normalize, PowerState, SpectralOutput};
