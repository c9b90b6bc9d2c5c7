pub mod cascade;
pub mod error;
pub mod function;
pub mod gibbs;
pub mod identity;
pub mod measure;
pub mod rng;
pub mod stats;
pub mod transforms;

pub use error::{Error, Result};
