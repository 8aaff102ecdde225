pub mod detect;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradcheck;
pub mod io;
pub mod losses;
pub mod matching;
pub mod net;
pub mod raster;
mod rng;
pub mod semantics;
pub mod synth;
pub mod teacher;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
