//! Geospatially aligned contrastive pretraining at desk scale: autodiff,
//! encoders, implicit feature lookup, contrastive objectives, synthetic data,
//! training and evaluation.

pub mod autodiff;
pub mod config;
pub mod datagen;
pub mod encoders;
pub mod error;
pub mod evalkit;
pub mod geo;
pub mod gradaudit;
mod init;
pub mod inr;
pub mod model;
pub mod objectives;
pub mod params;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
