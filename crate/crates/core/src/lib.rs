//! Line-image manifold datasets, a small from-scratch CNN trained on them,
//! and exhaustive one-pixel-flip attack analysis.

pub mod analytics;
pub mod attack;
pub mod bits;
pub mod error;
pub mod fsutil;
pub mod layout;
pub mod cnn;
pub mod linegen;
pub mod sweep;
pub mod trainer;

pub use bits::BitGrid;
pub use error::{Error, Result};
pub use linegen::{Dataset, LineImage, ManifoldPoint};
