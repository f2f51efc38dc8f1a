//! Sparse-to-dense GPS trajectory recovery with a state-propagation
//! diffusion model.
//!
//! The library reconstructs dense trajectories from sparse ones: given a
//! sparse trajectory and a query of timestamps, a conditional diffusion
//! model denoises the unknown locations step by step while a recurrent
//! state carries multi-scale features from each denoising step to the next.
//! See the guide under `book/` for a chapter-by-chapter walkthrough.

pub mod autodiff;
pub mod condition;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod model;
pub mod net;
pub mod train;
pub mod sample;
pub mod seeds;
pub mod traj;

pub use error::{Error, Result};
