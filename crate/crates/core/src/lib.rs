//! Collaborative self-training between the region proposal network and the
//! region classifier of a two-stage detector, for unsupervised domain
//! adaptation on synthetic paired-domain scenes.

pub mod adaptation;
pub mod config;
pub mod detector;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod params;
pub mod scenes;
pub mod seeding;
pub mod tape;
pub mod trainer;

pub use error::{Error, Result};
pub use geometry::BBox;
