pub mod atlas;
pub mod checkpoint;
pub mod config;
pub mod datasets;
pub mod density;
pub mod error;
pub mod eval;
pub mod flows;
pub mod geometry;
pub mod nn;
pub mod optim;
pub mod tape;
pub mod training;

pub use error::{Error, Result};
