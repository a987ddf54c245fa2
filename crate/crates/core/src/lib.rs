//! Extending a multilingual translation model to a new language by
//! imitating a frozen expert, on synthetic cipher languages with exact
//! oracles.

pub mod baselines;
pub mod corpus;
pub mod eval;
pub mod harness;
pub mod imitation;
pub mod error;
pub mod model;
pub mod synthlang;
pub mod tokenizer;

pub use error::{Error, Result};
