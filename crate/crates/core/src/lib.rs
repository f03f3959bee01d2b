pub mod audio;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod geometry;
pub mod mdn;
pub mod metrics;
pub mod nn;
pub mod render;
pub mod sfe;
pub mod trainer;

pub use error::{Error, Result};
