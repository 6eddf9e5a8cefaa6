//! Elementwise language representation: byte-level element embeddings
//! concatenated into material embeddings and aligned by a transformer
//! encoder whose heads match the element slots.

pub mod bench;
pub mod codec;
pub mod data;
pub mod embedding;
pub mod encoder;
pub mod error;
pub mod float;
pub mod labels;
pub mod model;
pub mod nn;
pub mod train;

pub use error::{Error, Result};
pub use float::Float;
