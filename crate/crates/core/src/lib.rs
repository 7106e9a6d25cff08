//! Aspect-augmented neural machine translation: synthetic tagged corpora,
//! sub-word tokenization, a small masked-LM encoder, an aspect extractor
//! and a Transformer translator that can consume the extracted aspects.

pub mod align;
pub mod aspects;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod sections;
pub mod tensor;
pub mod tokenize;
pub mod translate;

pub use error::{Error, Result};
