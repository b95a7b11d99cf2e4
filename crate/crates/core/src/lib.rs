pub mod archive;
pub mod ckg;
pub mod cli;
pub mod error;
pub mod eval;
pub mod kge;
pub mod meta;
pub mod numcore;
pub mod propagation;
pub mod scheduler;
pub mod seeds;

pub use error::{Error, Result};
