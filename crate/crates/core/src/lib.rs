pub mod cli;
pub mod error;
pub mod model;
pub mod numerics;
pub mod probe;
pub mod synthdata;
pub mod training;

pub use error::{Error, Result};
