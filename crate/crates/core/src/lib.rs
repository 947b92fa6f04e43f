//! Split-federated prompt tuning: a deterministic protocol simulator over a
//! small transformer, with exact traffic accounting and the closed-form
//! FL / SFL / SFPrompt cost model it is checked against.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod client;
pub mod costmodel;
pub mod data;
pub mod error;
pub mod experiment;
pub mod model;
pub mod server;
pub mod simnet;
pub mod tensor;

mod seed;

pub use error::{Error, Result};
