pub mod bev;
pub mod checkpoint;
pub mod detector;
pub mod distill;
pub mod eval;
pub mod experiments;
pub mod error;
pub mod grad;
pub mod plugin;
pub mod runner;
pub mod scenario;
pub mod verify;
pub mod world;

pub use error::{Error, Result};
