//! Zeroth-order training of denoisers in front of a query-only classifier,
//! and randomized-smoothing certification of the result.

pub mod blackbox;
pub mod certify;
pub mod checks;
pub mod data;
pub mod error;
pub mod experiment;
pub mod losses;
pub mod models;
pub mod numerics;
pub mod zo;

pub use error::{Error, Result};
