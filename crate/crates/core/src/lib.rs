pub mod adversary;
pub mod encoder;
pub mod episodes;
pub mod error;
pub mod heads;
pub mod params;

pub use error::{CoreError, Result};
pub use params::Parameters;
