pub mod channels;
pub mod error;
pub mod fourier;
pub mod games;
pub mod gaussian;
pub mod matfun;
pub mod matspace;
pub mod pipeline;
pub mod randop;

pub use error::{Error, Result};
