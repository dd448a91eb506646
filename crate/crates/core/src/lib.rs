pub mod attacks;
pub mod autodiff;
pub mod config;
pub mod data;
pub mod decision;
pub mod error;
pub mod indicator;
pub mod nn;
pub mod pipeline;
pub mod surface;
pub mod training;

pub use error::{Error, Result};
