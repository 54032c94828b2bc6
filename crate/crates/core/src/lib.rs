//! Infinite-horizon portfolio choice under ratio-type periodic evaluation in a
//! stochastic factor market with convex trading constraints.

pub mod cli;
pub mod constraints;
pub mod dual;
pub mod error;
pub mod fixedpoint;
pub mod grid;
pub mod market;
pub mod policy_sim;
pub mod primal;
pub mod reduce;
pub mod utility;

pub use error::{Error, Result};
