//! Zero- and few-shot visual anomaly detection on top of a frozen
//! vision-language backbone.
//!
//! Patch tokens from four encoder blocks are smoothed over several window
//! sizes, passed through a shared attention adapter, projected into the
//! joint text-image space and compared against two learned state prompts.
//! The class token yields an image score and the patch tokens a
//! segmentation map. A memory bank of normal patch features adds a
//! few-shot nearest-neighbour score on top.

pub mod adapter;
pub mod backbone;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod fewshot;
pub mod imageio;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod par;
pub mod prompt;
pub mod scoring;
pub mod spatial;
pub mod synthetic;
pub mod trainer;
mod util;

pub use error::{Error, Result};
