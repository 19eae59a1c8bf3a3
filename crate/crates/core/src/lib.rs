//! Pyramid-input, pyramid-output multi-organ segmentation with adaptive
//! feature fusion, trainable from partially labeled datasets.

pub mod checkpoint;
pub mod config;
pub mod datamodel;
pub mod error;
pub mod evaluation;
pub mod fusion;
pub mod graph;
pub mod inference;
pub mod io;
pub mod losses;
pub mod model;
pub mod network;
pub mod nn;
pub mod optim;
pub mod preprocess;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
