pub mod descriptors;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod io;
pub mod loopclosure;
pub mod pipeline;
pub mod posegraph;
pub mod sampling;
pub mod synthworld;

pub use error::{Error, Result};
