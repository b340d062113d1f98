//! Zero-shot detector adaptation driven by a text prompt.
//!
//! Source feature statistics are steered toward a prompt embedding with
//! prompt-driven instance normalisation, a teacher detection head is
//! fine-tuned on the steered features, and its pseudo-labels adapt a small
//! student detector on the unlabelled target stream.

pub mod artifacts;
pub mod captions;
pub mod cli;
pub mod conv;
pub mod dataset;
pub mod detection;
pub mod encoder;
pub mod error;
pub mod pipeline;
pub mod steering;
pub mod tensor;

pub use error::{Error, Result};
