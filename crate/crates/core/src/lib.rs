pub mod alignment;
pub mod cell_graph;
pub mod cli;
pub mod config;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod image_encoder;
pub mod numcore;
pub mod selfcheck;
pub mod st_encoder;
pub mod training;

pub use error::{Error, Result};
