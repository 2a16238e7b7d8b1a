pub mod backbone;
pub mod checkpoint;
pub mod continual_norm;
pub mod datasets;
pub mod error;
pub mod losses;
pub mod params;
pub mod synthesis;
pub mod toy;
pub mod trainer;

pub use error::{Error, Result};
