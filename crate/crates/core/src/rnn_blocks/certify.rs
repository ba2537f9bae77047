//! Measured error of the arithmetic blocks against their bounds.

use super::arith::{build_multiply, build_square};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt;

#[derive(Clone, Debug, PartialEq)]
pub struct Certificate {
    pub block: &'static str,
    pub n: usize,
    pub max_error: f64,
    pub bound: f64,
}

impl Certificate {
    pub fn pass(&self) -> bool {
        self.max_error <= self.bound
    }
}

impl fmt::Display for Certificate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<14} {:>3} {:>12.4e} {:>12.4e} {}",
            self.block,
            self.n,
            self.max_error,
            self.bound,
            if self.pass() { "pass" } else { "FAIL" }
        )
    }
}

pub fn header() -> String {
    format!("{:<14} {:>3} {:>12} {:>12} result", "block", "n", "max_error", "bound")
}

fn cert(block: &'static str, n: usize, bound: f64, mut err: impl FnMut() -> f64, samples: usize) -> Certificate {
    let max_error = (0..samples).map(|_| err()).fold(0.0, f64::max);
    Certificate { block, n, max_error, bound }
}

/// SQUARE on [−1,1], scaled SQUARE on [−2^n, 2^n] and MULTIPLY on
/// [−2^{n−1}, 2^{n−1}]², each at `samples` random points.
pub fn certify(n: usize, samples: usize, seed: u64) -> Vec<Certificate> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (n as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let q = 0.25f64.powi(n as i32);
    let sq = build_square(n, 0);
    let sqs = build_square(n, n as i32);
    let mul = build_multiply(n);
    let r = 2f64.powi(n as i32);
    let mut out = Vec::new();
    out.push(cert(
        "square",
        n,
        q * q,
        || {
            let x: f64 = rng.gen_range(-1.0..=1.0);
            (sq.eval(&[x]) - x * x).abs()
        },
        samples,
    ));
    out.push(cert(
        "square_scaled",
        n,
        q,
        || {
            let x: f64 = rng.gen_range(-r..=r);
            (sqs.eval(&[x]) - x * x).abs()
        },
        samples,
    ));
    out.push(cert(
        "multiply",
        n,
        2.0 * q,
        || {
            let x: f64 = rng.gen_range(-r / 2.0..=r / 2.0);
            let y: f64 = rng.gen_range(-r / 2.0..=r / 2.0);
            (mul.eval(&[x, y]) - x * y).abs()
        },
        samples,
    ));
    out
}
