pub mod consistency;
pub mod error;
pub mod evalharness;
pub mod guidance;
pub mod histogram;
pub mod image;
pub mod merge;
pub mod radiometry;
pub mod score;

pub use error::{Error, Result};
