//! Attribution methods for spectrogram CNNs: occlusion, integrated gradients,
//! DeepLIFT (Rescale) and conductance, plus a segment-and-average pipeline,
//! axiom checks and file formats.

pub mod attrib;
pub mod error;
pub mod formats;
pub mod net;
pub mod pipeline;
pub mod tensor;
pub mod validate;

pub use attrib::{AttributionMap, Baseline, Method, PathConfig, Rule};
pub use error::{Error, Result};
pub use net::{Model, Target};
pub use tensor::Tensor;
