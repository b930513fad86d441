//! Margin adjustment for long-tailed classification.
//!
//! The pieces, bottom to top:
//!
//! - [`dataset`]: synthetic long-tailed data, CSV persistence and the
//!   per-class frequency statistics everything else consumes.
//! - [`margins`]: inverse-frequency class weights under a family of link
//!   functions, the weighted softmax, and the additive / multiplicative /
//!   learnable adjustment zoo.
//! - [`model`]: a small classifier (linear or one hidden layer, dot or
//!   cosine head) with hand-derived gradients for plain, weighted,
//!   cost-sensitive and margin losses.
//! - [`training`]: end-to-end, decoupled two-stage and post-hoc
//!   strategies over pluggable samplers.
//! - [`eval`]: per-class / per-group accuracy reports and scheme
//!   comparisons.
//! - [`detproxy`]: a detection surrogate with a background class that
//!   counts the false positives additive shifts produce and
//!   multiplicative reweighting avoids.
//! - [`cli`]: the command implementations behind the `longtail` binary.

pub mod cli;
pub mod dataset;
pub mod detproxy;
pub mod error;
pub mod eval;
pub mod margins;
pub mod model;
pub mod presets;
pub mod stats;
pub mod training;

pub use error::{Error, Result};
