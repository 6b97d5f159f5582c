//! Test-time attention steering for a toy referring multimodal decoder.
//!
//! A frozen decoder-only transformer reads an image as a prefix of visual
//! tokens followed by a question. A latent offset `p_v` on the visual
//! tokens is optimized per sample so that attention pooled over the
//! question lands on a user-given region, and the answer is then decoded
//! with that latent (optionally contrasted against the unsteered branch).
//!
//! * [`numcore`]: tensors and a reverse-mode tape
//! * [`model`]: the toy decoder, its parameters and checkpoints
//! * [`visprompt`]: boxes, masks, scribbles and points on the token grid
//! * [`energy`]: attention aggregation and mask energies
//! * [`steering`]: the gradient-descent and Adam loops over `p_v`
//! * [`decoding`]: plain, edit-attention, steered and debiased decoding
//! * [`harness`]: synthetic data, training, evaluation and artifacts

pub mod decoding;
pub mod energy;
pub mod error;
pub mod harness;
pub mod model;
pub mod numcore;
pub mod par;
pub mod steering;
pub mod visprompt;

pub use error::{Error, Result};
pub use par::Exec;
