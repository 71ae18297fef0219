//! Steering-vector toolkit: extract latent vectors that make a frozen
//! transformer decoder emit a chosen sentence, decode with them, and do
//! arithmetic in the space they span.

pub mod error;
pub mod eval;
pub mod extract;
pub mod harness;
pub mod latent;
pub mod model;
pub mod rng;
pub mod svec;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
