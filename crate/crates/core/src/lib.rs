pub mod config;
pub mod data;
pub mod dsd;
pub mod error;
pub mod eval;
pub mod math;
pub mod model;
pub mod pipeline;
pub mod ratr;
pub mod selfcheck;
pub mod train;

pub use error::{MeltError, Result};
