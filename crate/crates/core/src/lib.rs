//! LDCformer face anti-spoofing with dual-attention supervision,
//! self-challenging supervision and transitional triplet mining.

pub mod attention;
pub mod data;
pub mod diffcore;
pub mod gradsuite;
mod error;
pub mod ldc;
pub mod metriclearn;
pub mod metrics;
pub mod model;
pub mod par;
pub mod selfchallenge;
pub mod train;

pub use error::{Error, Result};
pub use par::Exec;
