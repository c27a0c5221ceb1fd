//! Weakly supervised multiple instance learning for whole-slide image
//! classification.
//!
//! Slides are tiled into bags of instances. Each epoch scores every tile,
//! keeps the highest-ranked tile per slide, and trains on those tiles with a
//! class-weighted cross-entropy. A slide is called positive when any of its
//! tiles is.

pub mod embed;
pub mod ensemble;
pub mod error;
pub mod eval;
pub mod mil;
pub mod numerics;
pub mod seeding;
pub mod slide;
mod tabular;

pub use error::{Error, Result};
