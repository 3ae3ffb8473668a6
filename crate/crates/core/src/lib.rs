pub mod backbone;
pub mod error;
pub mod evalkit;
pub mod harness;
pub mod layers;
pub mod numcore;
pub mod scenegen;
pub mod setloss;
pub mod transformer;

pub use error::{Error, Result};
