pub mod diffusion;
pub mod encoder;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod synthworld;
pub mod trainer;
pub mod udl;

pub use error::{Error, Result};
