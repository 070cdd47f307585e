//! Conditional average treatment effects under unmeasured confounding with
//! proximal variables: kernel bridge estimation, cross-fit doubly robust
//! scores, final-stage CATE regression, linear-projection inference and
//! rank-weighted evaluation.

pub mod bridge;
pub mod cate;
pub mod data;
pub mod error;
pub mod inference;
pub mod kernels;
pub mod linalg;
pub mod pipeline;
pub mod rate;
pub mod scores;
pub mod seeds;
pub mod simulate;

pub use error::{Error, Result};
