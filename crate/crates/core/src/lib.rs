//! Top-down attention steering for a miniature vision transformer.
//!
//! A frozen feedforward transformer ([`backbone`]) is augmented with a
//! tunable top-down module ([`topdown`]): output tokens are reweighted by
//! their similarity to a task embedding, sent back through a chain of
//! linear feedback layers, and injected into the value input of every
//! self-attention layer on a second forward pass. [`training`] implements
//! the pre-tune/tune pipeline with baseline methods and parameter/FLOP
//! accounting; [`data`] generates cluttered synthetic tasks with known
//! relevant patches; [`checkpoint`], [`config`] and [`export`] cover
//! persistence and reporting.

pub mod backbone;
mod binio;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod export;
pub mod params;
pub mod pipeline;
pub mod tensor;
pub mod topdown;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tape, Tensor, Var};
