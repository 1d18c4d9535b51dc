pub mod cg;
pub mod cli;
pub mod data;
pub mod error;
pub mod fisher;
pub mod linalg;
pub mod net;
pub mod rng;
pub mod telemetry;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
