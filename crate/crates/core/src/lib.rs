//! Transformer-based discrete-time survival modelling from longitudinal
//! patient records, with a confounded synthetic data generator and
//! estimators of treatment effects on restricted mean survival time.

pub mod autodiff;
pub mod causal;
pub mod error;
pub mod losses;
pub mod model;
pub mod pipeline;
pub mod simulator;
pub mod survival;

pub use error::{Error, Result};

#[global_allocator]
static ALLOC: mimalloc::MiMalloc = mimalloc::MiMalloc;
