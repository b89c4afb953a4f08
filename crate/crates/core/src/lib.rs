pub mod analysis;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod kv;
pub mod moe;
pub mod nn;
pub mod train;

pub use error::{Error, Result};
