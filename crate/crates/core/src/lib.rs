//! Adapter tuning laboratory for small multilingual code transformers.

pub mod adapter;
pub mod autodiff;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod params;
pub mod probing;
pub mod tasks;
pub mod training;

pub use error::{Error, Result};
