//! Dual-head pyramid transformer segmentation on a small deterministic
//! tensor engine, with analytic complexity accounting, a toy training and
//! evaluation pipeline, and an RGB-D assistive navigation decision engine.

pub mod classes;
pub mod complexity;
pub mod error;
pub mod io;
pub mod model;
pub mod nav;
pub mod parallel;
pub mod pipeline;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Element, Tape, Tensor, Var};
