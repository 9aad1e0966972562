#![allow(clippy::needless_range_loop)]

pub mod ablate;
pub mod config;
pub mod conversation;
pub mod discriminator;
pub mod encoders;
pub mod error;
pub mod hierarchical;
pub mod metrics;
pub mod mgif;
pub mod model;
pub mod numeric;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
