//! Depth-attention cycle-consistent image enhancement.
//!
//! Foreground and background streams, split by a depth map, each get the full
//! cycle-consistent adversarial objective; the generator minimizes their
//! weighted sum.

pub mod attnmask;
pub mod datapipe;
pub mod diffcore;
mod error;
pub mod losses;
pub mod metrics;
pub mod netarch;
pub mod trainer;

pub use error::{Error, Result};
