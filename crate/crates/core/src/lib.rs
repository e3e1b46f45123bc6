pub mod alignment;
pub mod cam;
pub mod data;
pub mod detr;
pub mod error;
pub mod eval;
pub mod nn;
pub mod train;

pub use error::{Error, Result};
