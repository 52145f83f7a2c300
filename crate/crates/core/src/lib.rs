//! Attention-head probing, attribution and intervention on a planted-head
//! toy transformer over synthetic grid-world scenes.

pub mod cli;
pub mod config;
pub mod corpus;
pub mod error;
pub mod function;
pub mod hashing;
pub mod intervene;
pub mod metrics;
pub mod model;
pub mod par;
pub mod probe;
pub mod trace;
pub mod vocab;

pub use error::{Error, Result};
pub use function::FunctionLabel;
