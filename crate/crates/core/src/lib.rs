//! Light self-limited attention (LSLA), the hierarchical ViT-LSLA backbone
//! built on it, analytic parameter/FLOP accounting, and a small training
//! harness, all on a self-contained `f64` reverse-mode core.

pub mod error;
pub mod attention;
pub mod numcore;
pub mod model;
pub mod accounting;
pub mod harness;
pub mod verify;

pub use error::{LslaError, Result};
