//! Classical marking strategies and the oracle replaying the network MARK.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct MarkedSet {
    /// Marked element ids in increasing order.
    pub indices: Vec<usize>,
    /// Σ marked / Σ total (1 for an all-zero field).
    pub achieved_fraction: f64,
}

impl MarkedSet {
    fn new(mut indices: Vec<usize>, values: &[f64]) -> MarkedSet {
        indices.sort_unstable();
        let total: f64 = values.iter().sum();
        let marked: f64 = indices.iter().map(|&i| values[i]).sum();
        let achieved_fraction = if total > 0.0 { marked / total } else { 1.0 };
        MarkedSet { indices, achieved_fraction }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

fn check(values: &[f64], theta: f64, upper_closed: bool) -> Result<()> {
    let ok_theta = if upper_closed { theta > 0.0 && theta <= 1.0 } else { theta > 0.0 && theta < 1.0 };
    if !ok_theta {
        return Err(Error::Validation(format!("theta = {theta} out of range")));
    }
    if let Some(v) = values.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
        return Err(Error::Validation(format!("marking needs finite nonnegative values, got {v}")));
    }
    Ok(())
}

/// Minimal set with Σ_M ≥ θ Σ, taken as the shortest prefix of the values
/// sorted descending with earliest index first among equals.
pub fn doerfler_mark(values: &[f64], theta: f64) -> Result<MarkedSet> {
    check(values, theta, true)?;
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let total = order.iter().fold(0.0, |s, &i| s + values[i]);
    let goal = theta * total;
    let mut picked = Vec::new();
    let mut acc = 0.0;
    if total > 0.0 {
        for &i in &order {
            if acc >= goal {
                break;
            }
            acc += values[i];
            picked.push(i);
        }
    }
    Ok(MarkedSet::new(picked, values))
}

/// {T : ρ_T > (1−θ) max ρ}.
pub fn maximum_strategy_mark(values: &[f64], theta: f64) -> Result<MarkedSet> {
    check(values, theta, true)?;
    let max = values.iter().copied().fold(0.0, f64::max);
    let cut = (1.0 - theta) * max;
    let picked = (0..values.len()).filter(|&i| values[i] > cut).collect();
    Ok(MarkedSet::new(picked, values))
}

/// Number of pivot halvings that make the rounding band at most `eps/n` wide.
pub fn mark_iterations(max: f64, n: usize, eps: f64) -> usize {
    if !(max > 0.0) || n == 0 {
        return 1;
    }
    let r = (max * n as f64 / eps).log2().ceil();
    (r.max(0.0) as usize + 1).max(1)
}

/// Every intermediate quantity of the marking network, computed with the same
/// floating-point operations in the same order.
#[derive(Clone, Debug, PartialEq)]
pub struct MarkTrace {
    pub max: f64,
    pub sum: f64,
    /// Pivot y_k and step z_k after the search.
    pub pivot: f64,
    pub step: f64,
    /// Upper band edge; rounded entries snap to it.
    pub upper: f64,
    pub lower: f64,
    pub perturbed: Vec<f64>,
    /// Network output: positive exactly on marked entries.
    pub output: Vec<f64>,
}

/// Replays the marking network on `x` with `k` search steps. With `stop` set,
/// the output is additionally capped by Σx − stop.
pub fn mark_replay(x: &[f64], theta: f64, k: usize, stop: Option<f64>) -> MarkTrace {
    let mut max = 0.0f64;
    let mut sum = 0.0f64;
    for &v in x {
        max += (v - max).max(0.0);
        sum += v;
    }
    let mut y = 0.5 * max;
    let mut z = 0.25 * max;
    for _ in 1..k {
        let mut sigma = 0.0;
        for &v in x {
            if v >= y {
                sigma += v;
            }
        }
        // R = z when σ ≥ θS, V = z − R; y' = (y + R) − V
        if sigma >= theta * sum {
            y = (y + z) - 0.0;
        } else {
            y = (y + 0.0) - z;
        }
        z *= 0.5;
    }
    let upper = y + 2.0 * z;
    let lower = y - 2.0 * z;
    let band_sum = lower + upper;
    let perturbed: Vec<f64> = x
        .iter()
        .map(|&v| {
            let inside = !(v > upper) && !(v + upper < band_sum);
            let w = if inside { upper } else { 0.0 };
            w + (v - w).max(0.0)
        })
        .collect();
    let mut above = 0.0;
    let mut total = 0.0;
    for &v in &perturbed {
        if v > upper {
            above += v;
        }
        total += v;
    }
    let goal = theta * total;
    let mut prefix = 0.0;
    let mut output = Vec::with_capacity(x.len());
    for &v in &perturbed {
        let excess = (v - upper).max(0.0);
        let tie = if v == upper { upper } else { 0.0 };
        let want = if above + prefix < goal { upper } else { 0.0 };
        let m = tie - (tie - want).max(0.0);
        let mut out = m + (excess - m).max(0.0);
        if let Some(s) = stop {
            let b = sum - s;
            out -= (out - b).max(0.0);
        }
        output.push(out);
        prefix += tie;
    }
    MarkTrace { max, sum, pivot: y, step: z, upper, lower, perturbed, output }
}

/// Marked set and perturbed field produced by the marking network with
/// accuracy `eps`; `eps = 0` is plain Dörfler marking.
pub fn perturbed_doerfler_oracle(values: &[f64], theta: f64, eps: f64) -> Result<(MarkedSet, Vec<f64>)> {
    check(values, theta, true)?;
    if !(eps >= 0.0) {
        return Err(Error::Validation(format!("eps = {eps} must be nonnegative")));
    }
    if eps == 0.0 {
        return Ok((doerfler_mark(values, theta)?, values.to_vec()));
    }
    let max = values.iter().copied().fold(0.0, f64::max);
    let k = mark_iterations(max, values.len(), eps);
    Ok(perturbed_doerfler_oracle_with_k(values, theta, k))
}

pub fn perturbed_doerfler_oracle_with_k(values: &[f64], theta: f64, k: usize) -> (MarkedSet, Vec<f64>) {
    let tr = mark_replay(values, theta, k, None);
    let picked = (0..values.len()).filter(|&i| tr.output[i] > 0.0).collect();
    let set = MarkedSet::new(picked, &tr.perturbed);
    (set, tr.perturbed)
}
