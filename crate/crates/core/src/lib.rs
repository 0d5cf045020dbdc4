//! Knowledge-grounded dialog state tracking.
//!
//! A shared transformer encoder scores knowledge elements (slot types,
//! slot-value pairs or training examples) against the dialog context; the
//! top-k elements are prepended to the context, least similar first, and the
//! decoder generates the linearized dialog state. Retrieval and generation
//! are trained jointly.

pub mod corpus;
pub mod error;
pub mod eval;
pub mod fsio;
pub mod integration;
pub mod knowledge;
pub mod model;
pub mod retrieval;
pub mod training;

pub use error::{Error, Result};
