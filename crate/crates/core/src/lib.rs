//! Complete-the-look: scene-based complementary product recommendation.
//!
//! The crate covers the whole pipeline: turning shop-the-look annotations into
//! cropped training pairs ([`dataset`]), frozen visual features
//! ([`features`]), the hybrid global/local compatibility head ([`model`]),
//! triplet training with hand-derived gradients ([`training`]), and the
//! evaluation protocols ([`eval`]).

pub mod config;
pub mod corpus;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod features;
pub mod geometry;
pub mod model;
pub mod pipeline;
pub mod training;

pub use error::{Error, Result};
