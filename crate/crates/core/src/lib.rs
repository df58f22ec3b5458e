pub mod backbone;
pub mod data_io;
pub mod error;
pub mod geometry;
pub mod localization;
pub mod metrics;
pub mod pipeline;
pub mod pretrain;

pub use error::{Error, Result};
