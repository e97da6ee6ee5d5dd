//! Binary default prediction for low-default portfolios: logit and GEV-link
//! regression, additive (penalized spline) extensions, Weights-of-Evidence
//! coarse classing, fully conditional multiple imputation and defaults-only
//! evaluation.

pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod fit;
pub mod links;
pub mod preprocess;
pub mod smooth;

pub use error::{Error, Result};
