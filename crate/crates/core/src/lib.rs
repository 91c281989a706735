//! Speaker embeddings from a VGG-style CNN encoder with self multi-head
//! attention pooling, plus everything needed to train and evaluate them.

pub mod autodiff;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod features;
pub mod head;
pub mod model;
pub mod pooling;
pub mod trainer;

pub use autodiff::{Mode, Tape, Tensor, Var};
pub use error::{Error, Result};
