//! Synthetic task, training, evaluation and file artifacts.

pub mod config_file;
pub mod data;
pub mod eval;
pub mod heatmap;
pub mod selftest;
pub mod train;
pub mod vocab;
