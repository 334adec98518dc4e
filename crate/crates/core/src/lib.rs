//! Switching density networks for identifying hybrid PID controllers from demonstrations.
//!
//! A trunk network maps an observation to K logits; a Gumbel-softmax switch picks a
//! row of a bias-free parameter table, and that row is decoded into a PID law whose
//! predicted action is scored by a Gaussian likelihood. After training the table is
//! the identified hybrid controller.

// `!(x > 0.0)` style checks are deliberate: they reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::type_complexity, clippy::too_many_arguments)]

pub mod checkpoint;
pub mod control;
pub mod diffcore;
pub mod envs;
pub mod error;
pub mod evalkit;
pub mod gumbel;
pub mod models;
pub mod par;
pub mod train;

pub use error::{Error, Result};
