//! Small ViT-style feature extractor with bottleneck adapters.

mod config;
pub mod io;
mod model;
mod params;

pub use config::{AdapterConfig, EncoderConfig};
pub use model::{adapt_mlp, AdapterScale, AdapterVars, Bound, Encoder, MlpVars};
pub use params::{ModelCheckpoint, ParamEntry, ParamGroup, ParamMode, ParameterStore};
