pub mod corpus;
pub mod demo;
mod digest;
pub mod error;
pub mod filter;
pub mod io;
pub mod labeling;
pub mod metrics;
pub mod pipeline;
pub mod providers;
pub mod rationale;
pub mod retrieval;
pub mod vindex;

pub use error::{Error, Result};
