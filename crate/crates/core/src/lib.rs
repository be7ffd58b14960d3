//! Multi-view clustering with contrastive pretraining and momentum-teacher
//! self-distillation.

pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod pseudolabel;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
