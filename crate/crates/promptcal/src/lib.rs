//! Attribute-aware test-time prompt calibration.

pub mod attributes;
pub mod bench;
pub mod calibration;
pub mod embed;
pub mod error;
pub mod objective;
pub mod tuner;

pub use error::{Error, Result};
