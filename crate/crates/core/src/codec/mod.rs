//! Analysis and synthesis transforms and the named codec configurations.
//!
//! The encoder is a stack of point-wise blocks (convolution, batch norm,
//! ReLU) followed by a max over points, a learned per-channel gain and a
//! constant factor of ten. Its rounded output is what gets entropy coded.
//! The decoder is a small MLP that maps the latent directly to class logits.

mod config;
mod model;

pub use config::{format_kilo_2sf, CodecConfig, ConfigName, EncoderLayer, MacCount, INPUT_CHANNELS, POINT_COUNTS};
pub use model::{Analysis, Codec, CriticalPointSet, FusedEncoder, Trace, LATENT_SCALE, PRIOR_PREFIX};
