//! Adaptive P1 finite elements on triangles with newest-vertex bisection, and
//! explicitly constructed ReLU recurrent networks that reproduce the
//! estimate and mark steps.

pub mod error;
pub mod rnn_core;

pub use error::{Error, Result};
pub mod fem;
pub mod marking;
pub mod rnn_blocks;
pub mod stochastic_greedy;
pub mod mesh;
pub mod training;
pub mod cli;
