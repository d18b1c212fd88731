//! Point-prompt "everything mode" segmentation toolkit.
//!
//! Grid prompting, prompt-to-instance assignment, a trainable prediction
//! head over dense feature maps, mask post-processing and evaluation.

pub mod confidence;
pub mod dataset;
pub mod error;
pub mod featfile;
pub mod features;
pub mod fsutil;
pub mod grid;
pub mod head;
pub mod losses;
pub mod mask;
pub mod metrics;
pub mod pipeline;
pub mod postprocess;

pub use error::{Error, Result};
pub use mask::{BinaryMask, BoxXyxy};
