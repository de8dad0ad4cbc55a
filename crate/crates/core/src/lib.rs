//! Open-world semantic segmentation on a dual-decoder network.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod formats;
pub mod gradsuite;
pub mod losses;
pub mod metrics;
pub mod net;
pub mod openworld;
pub mod runner;
pub mod stats;
pub mod synthdata;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};

/// Label value of pixels excluded from training and evaluation.
pub const VOID: u8 = 255;
