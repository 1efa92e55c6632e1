//! Parameter-efficient RGB + thermal adaptation of a miniature
//! alternating-attention multi-view geometry transformer, with the data,
//! training, evaluation and feature-analysis stack around it.

pub mod adapters;
pub mod analysis;
pub mod autograd;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod geometry;
pub mod imaging;
pub mod metrics;
pub mod modality;
pub mod model;
pub mod params;
pub mod training;

pub use error::{Error, Result};
pub use modality::Modality;
