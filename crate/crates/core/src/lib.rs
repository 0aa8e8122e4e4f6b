#![no_std]

extern crate alloc;

pub mod assignment;
pub mod error;
pub mod model;
pub mod motmetrics;
pub mod params;
pub mod synthworld;
pub mod tensor;
pub mod trackstore;
pub mod training;
pub mod transformer;

pub use error::{Error, Result};
