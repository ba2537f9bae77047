//! Explicit network constructions: comparisons, squaring and products, the
//! residual estimator and the marking pipeline.

mod arith;
pub mod certify;
mod estimator;
pub mod lanes;
mod mark;

pub use arith::{build_diam, build_if, build_if_direct, build_multiply, build_square, Comparator};
pub use estimator::{
    build_estimator, build_estimator_with, build_jump, build_vol, encode_inputs, Windows, RECORD_LEN,
};
pub use lanes::IfCfg;
pub use mark::{build_adaptive, build_adaptive_with, build_binary, build_mark, build_mark_with, build_round, build_sumy, MarkOutputs};

use crate::error::{Error, Result};
use crate::rnn_core::{DeepRnn, Dnn};

/// Round-off exponent of the arithmetic the networks run in.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FloatModel {
    pub n_min: usize,
}

impl Default for FloatModel {
    fn default() -> FloatModel {
        FloatModel { n_min: 52 }
    }
}

impl FloatModel {
    pub fn new(n_min: usize) -> Result<FloatModel> {
        if n_min == 0 {
            return Err(Error::Validation("n_min must be at least 1".into()));
        }
        Ok(FloatModel { n_min })
    }

    /// Doubling steps used by every comparison.
    pub fn if_cfg(&self) -> IfCfg {
        IfCfg { steps: self.n_min + IF_MARGIN, one_layer: false }
    }
}

/// Extra doubling steps beyond n_min that absorb rounding in the doubling chain.
pub const IF_MARGIN: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdaptiveParams {
    pub theta: f64,
    /// Construction accuracy: per-element estimator error budget is eps/#T.
    pub eps: f64,
    /// Stopping tolerance; the network stops once Σρ̃² ≤ eps_tol².
    pub eps_tol: f64,
    /// Accuracy parameter of the squaring and product networks.
    pub n: usize,
    /// Pivot search steps of the marking network.
    pub k: usize,
}

impl AdaptiveParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta > 0.0 && self.theta < 1.0) {
            return Err(Error::Validation(format!("theta = {} must lie in (0,1)", self.theta)));
        }
        if !(self.eps > 0.0) || !(self.eps_tol > 0.0) {
            return Err(Error::Validation("eps and eps_tol must be positive".into()));
        }
        if self.n == 0 || self.k == 0 {
            return Err(Error::Validation("n and k must be at least 1".into()));
        }
        Ok(())
    }

    /// n = max(40, ⌈log₂(#T/eps)⌉ + 8).
    pub fn accuracy_for(n_elements: usize, eps: f64) -> usize {
        let r = ((n_elements.max(1) as f64) / eps).log2().ceil();
        40usize.max(r.max(0.0) as usize + 8)
    }
}

/// A recurrent network evaluated on the impulse (x, 0, …, 0) of fixed length;
/// the result is one entry of the last output.
#[derive(Clone, Debug, PartialEq)]
pub struct ImpulseBlock {
    pub rnn: DeepRnn,
    pub steps: usize,
    pub output: usize,
}

impl ImpulseBlock {
    pub fn eval(&self, x: &[f64]) -> f64 {
        self.rnn.eval_impulse(x, self.steps)[self.output]
    }

    /// Feed-forward network computing the same value.
    pub fn unroll(&self) -> Dnn {
        let full = self.rnn.unroll_impulse(self.steps);
        select_output(full, self.output)
    }
}

/// Keeps one output row of a network.
pub(crate) fn select_output(mut d: Dnn, row: usize) -> Dnn {
    d.keep_outputs(&[row]);
    d
}
