//! Few-shot indoor localization with meta-learned initial parameters.
//!
//! The pipeline simulates RSS and CSI fingerprints, samples `N`-way episodes,
//! meta-trains a small MLP and evaluates fine-tuned localization error.

pub mod error;
pub mod evaluation;
pub mod fingerprint;
pub mod geom;
pub mod metalearn;
pub mod neuralnet;
pub mod propagation;
pub mod scenario;
pub mod tasking;

pub use error::{Error, Result};
pub use geom::Point2;
