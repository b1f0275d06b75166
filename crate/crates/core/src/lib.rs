//! Variational flow matching for categorical data.
//!
//! The crate trains generative flows whose velocity field points from the
//! current state toward a predicted point on a product of probability
//! simplices, and samples from them by ODE or SDE integration. Graphs are
//! handled as collections of categorical node and edge variables.

pub mod checks;
pub mod error;
pub mod graphs;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod objectives;
pub mod paths;
pub mod rng;
pub mod sampling;
pub mod state;
pub mod train;

pub use error::{Error, Result};
