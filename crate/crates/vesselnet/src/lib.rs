pub mod analysis;
pub mod commands;
pub mod config;
pub mod dataio;
pub mod encoder;
pub mod error;
pub mod fft;
pub mod frontend;
pub mod head;
pub mod model;
pub mod optim;
pub mod real;
pub mod synthgen;
#[doc(hidden)]
pub mod testutil;
pub mod types;

pub use error::{Error, Result};
pub use real::Real;
