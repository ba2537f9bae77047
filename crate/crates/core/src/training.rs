//! Gradient-free training of small marking networks: a recurrent blueprint
//! for the maximum strategy tuned by SPSA, and the train-on-the-job loop that
//! refines a fixed share of elements per step.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fem::{energy_norm_sq, gradients, residual_estimator, solve_poisson, EstimatorForm, Source};
use crate::mesh::{Domain, Mesh};

/// How a stage reads the output sequence of the stage before it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Link {
    /// Entry i of the previous output.
    Plain,
    /// Components `each` of entry i followed by components `last` of the final entry.
    BroadcastLast { each: Vec<usize>, last: Vec<usize> },
}

/// One basic recurrent stage: a ReLU net with a linear last layer that sees
/// its external input followed by the components `recur` of its own previous
/// output (zero before the first entry).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageShape {
    pub input: usize,
    pub recur: Vec<usize>,
    /// Widths s_1, …, s_L after the input layer s_0 = input + recur.len().
    pub layers: Vec<usize>,
    pub link: Link,
}

impl StageShape {
    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input + self.recur.len()];
        w.extend_from_slice(&self.layers);
        w
    }

    fn n_params(&self) -> usize {
        self.widths().windows(2).map(|p| p[0] * p[1]).sum()
    }

    fn output(&self) -> usize {
        *self.layers.last().unwrap_or(&0)
    }
}

/// Architecture plus a flat parameter vector, stage by stage, layer by layer,
/// each weight matrix in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Blueprint {
    pub stages: Vec<StageShape>,
    pub params: Vec<f64>,
    /// Recursive weights (first-layer columns fed by the recurrence) are kept in {−1, 0, 1}.
    pub restrict_recursive: bool,
}

impl Blueprint {
    pub fn new(stages: Vec<StageShape>, restrict_recursive: bool) -> Result<Blueprint> {
        if stages.is_empty() {
            return Err(Error::Dimension("a blueprint needs at least one stage".into()));
        }
        for (i, s) in stages.iter().enumerate() {
            if s.layers.is_empty() || s.layers.contains(&0) {
                return Err(Error::Dimension(format!("stage {i} needs nonempty layers")));
            }
            if let Some(&r) = s.recur.iter().find(|&&r| r >= s.output()) {
                return Err(Error::Dimension(format!("stage {i} feeds back component {r} of {}", s.output())));
            }
            let want = if i == 0 {
                s.input
            } else {
                let prev = stages[i - 1].output();
                match &s.link {
                    Link::Plain => prev,
                    Link::BroadcastLast { each, last } => {
                        if each.iter().chain(last).any(|&c| c >= prev) {
                            return Err(Error::Dimension(format!("stage {i} reads a component beyond {prev}")));
                        }
                        each.len() + last.len()
                    }
                }
            };
            if s.input != want {
                return Err(Error::Dimension(format!("stage {i} takes {} inputs, link provides {want}", s.input)));
            }
        }
        let n = stages.iter().map(StageShape::n_params).sum();
        Ok(Blueprint { stages, params: vec![0.0; n], restrict_recursive })
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn input_size(&self) -> usize {
        self.stages[0].input
    }

    pub fn output_size(&self) -> usize {
        self.stages.last().unwrap().output()
    }

    pub fn with_params(mut self, params: Vec<f64>) -> Result<Blueprint> {
        if params.len() != self.params.len() {
            return Err(Error::Dimension(format!("{} parameters given, blueprint has {}", params.len(), self.params.len())));
        }
        self.params = params;
        Ok(self)
    }

    /// Flat indices of the recursive weights.
    pub fn recursive_indices(&self) -> Vec<usize> {
        let mut out = Vec::new();
        let mut off = 0;
        for s in &self.stages {
            let w = s.widths();
            for r in 0..w[1] {
                for c in s.input..w[0] {
                    out.push(off + r * w[0] + c);
                }
            }
            off += s.n_params();
        }
        out
    }

    /// Rounds the recursive weights to the nearest of −1, 0, 1 when restricted.
    pub fn project(&self, params: &mut [f64]) {
        if self.restrict_recursive {
            for i in self.recursive_indices() {
                params[i] = params[i].clamp(-1.0, 1.0).round();
            }
        }
    }

    pub fn is_feasible(&self, params: &[f64]) -> bool {
        !self.restrict_recursive || self.recursive_indices().iter().all(|&i| matches!(params[i], -1.0 | 0.0 | 1.0))
    }

    /// Uniform on ±gain·(6/fan_in)^{1/2}; recursive weights are drawn without
    /// the gain and then projected.
    pub fn randomize(&mut self, rng: &mut impl Rng, gain: f64) {
        let rec = self.recursive_indices();
        let mut off = 0;
        for s in &self.stages {
            let w = s.widths();
            for p in w.windows(2) {
                let a = (6.0 / p[0] as f64).sqrt();
                for i in off..off + p[0] * p[1] {
                    let g = if rec.binary_search(&i).is_ok() { 1.0 } else { gain };
                    self.params[i] = g * rng.gen_range(-a..=a);
                }
                off += p[0] * p[1];
            }
        }
        let mut ps = std::mem::take(&mut self.params);
        self.project(&mut ps);
        self.params = ps;
    }

    /// Output sequence of the last stage for `n` entries of `input_size` values.
    pub fn eval(&self, xs: &[f64], n: usize) -> Vec<f64> {
        self.eval_with(&self.params, xs, n)
    }

    pub fn eval_with(&self, params: &[f64], xs: &[f64], n: usize) -> Vec<f64> {
        assert_eq!(params.len(), self.params.len(), "parameter vector length");
        assert_eq!(xs.len(), n * self.input_size(), "input length");
        let mut seq = xs.to_vec();
        let mut off = 0;
        for (i, s) in self.stages.iter().enumerate() {
            let inp = if i == 0 {
                seq
            } else {
                let prev = self.stages[i - 1].output();
                match &s.link {
                    Link::Plain => seq,
                    Link::BroadcastLast { each, last } => {
                        let tail: Vec<f64> = last.iter().map(|&c| seq[(n - 1) * prev + c]).collect();
                        let mut v = Vec::with_capacity(n * s.input);
                        for e in 0..n {
                            v.extend(each.iter().map(|&c| seq[e * prev + c]));
                            v.extend_from_slice(&tail);
                        }
                        v
                    }
                }
            };
            let np = s.n_params();
            seq = run_stage(s, &params[off..off + np], &inp, n);
            off += np;
        }
        seq
    }
}

fn run_stage(s: &StageShape, w: &[f64], xs: &[f64], n: usize) -> Vec<f64> {
    let widths = s.widths();
    let so = s.output();
    let mut out = vec![0.0; n * so];
    let mut a = vec![0.0; widths[0]];
    let mut b = Vec::new();
    for e in 0..n {
        a.resize(widths[0], 0.0);
        a[..s.input].copy_from_slice(&xs[e * s.input..(e + 1) * s.input]);
        for (k, &c) in s.recur.iter().enumerate() {
            a[s.input + k] = if e == 0 { 0.0 } else { out[(e - 1) * so + c] };
        }
        let mut off = 0;
        for (l, p) in widths.windows(2).enumerate() {
            let last = l + 2 == widths.len();
            b.clear();
            for r in 0..p[1] {
                let row = &w[off + r * p[0]..off + (r + 1) * p[0]];
                let v: f64 = row.iter().zip(&a).fold(0.0, |acc, (x, y)| acc + x * y);
                b.push(if last || v > 0.0 { v } else { 0.0 });
            }
            off += p[0] * p[1];
            std::mem::swap(&mut a, &mut b);
        }
        out[e * so..(e + 1) * so].copy_from_slice(&a);
    }
    out
}

/// B₁ reads ρ_i and its previous second output, B₂ reads (y_{i,1}, y_{n,2}).
pub fn maxstrategy_blueprint() -> Blueprint {
    let b1 = StageShape { input: 1, recur: vec![1], layers: vec![3, 2], link: Link::Plain };
    let b2 = StageShape { input: 2, recur: vec![], layers: vec![1], link: Link::BroadcastLast { each: vec![0], last: vec![1] } };
    Blueprint::new(vec![b1, b2], true).expect("fixed architecture is consistent")
}

/// Weights for which y_{i,2} is the running maximum and the output is
/// ρ_i − (1−θ) max ρ.
pub fn maxstrategy_hand_weights(theta: f64) -> Vec<f64> {
    let mut p = Vec::new();
    p.extend([1.0, 0.0, -1.0, 0.0, -1.0, 1.0]);
    p.extend([1.0, -1.0, 0.0, 1.0, -1.0, 1.0]);
    p.extend([1.0, -(1.0 - theta)]);
    p
}

/// Weights reported for the learned maximum strategy.
pub struct FixtureWeights;

impl FixtureWeights {
    pub const B1_INPUT: [[f64; 2]; 3] = [[0.4394, 0.0], [-0.6591, 0.0], [-0.6466, -1.0]];
    pub const B1_OUTPUT: [[f64; 3]; 2] = [[-0.2471, 0.1095, -0.2358], [-0.1868, 0.3123, -0.9564]];
    pub const B2: [f64; 2] = [-0.1585, 0.2804];

    /// Flat parameters in the layout of [`maxstrategy_blueprint`].
    pub fn params() -> Vec<f64> {
        let mut p: Vec<f64> = Self::B1_INPUT.iter().flatten().copied().collect();
        p.extend(Self::B1_OUTPUT.iter().flatten());
        p.extend(Self::B2);
        p
    }

    pub fn blueprint() -> Blueprint {
        maxstrategy_blueprint().with_params(Self::params()).expect("fixture matches the blueprint")
    }
}

/// Elements whose first output component is positive.
pub fn blueprint_mark(bp: &Blueprint, rho: &[f64]) -> Vec<usize> {
    let y = bp.eval(rho, rho.len());
    let so = bp.output_size();
    (0..rho.len()).filter(|&i| y[i * so] > 0.0).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpsaConfig {
    pub a: f64,
    pub big_a: f64,
    pub alpha: f64,
    pub c: f64,
    pub gamma: f64,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for SpsaConfig {
    fn default() -> SpsaConfig {
        SpsaConfig { a: 2.0, big_a: 50.0, alpha: 0.602, c: 0.1, gamma: 0.101, iterations: 500, seed: 0 }
    }
}

impl SpsaConfig {
    /// a_k = a/(k+1+A)^α.
    pub fn a_k(&self, k: usize) -> f64 {
        self.a / (k as f64 + 1.0 + self.big_a).powf(self.alpha)
    }

    /// c_k = c/(k+1)^γ.
    pub fn c_k(&self, k: usize) -> f64 {
        self.c / (k as f64 + 1.0).powf(self.gamma)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.a >= 0.0) || !(self.c > 0.0) || !(self.big_a >= 0.0) || !(self.alpha >= 0.0) || !(self.gamma >= 0.0) {
            return Err(Error::Validation("SPSA gains must be nonnegative with c > 0".into()));
        }
        Ok(())
    }
}

/// Maximizes `objective` by simultaneous perturbation along Rademacher directions.
pub fn spsa_optimize(
    bp: &Blueprint,
    mut objective: impl FnMut(&[f64]) -> Result<f64>,
    cfg: &SpsaConfig,
) -> Result<Blueprint> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut theta = bp.params.clone();
    bp.project(&mut theta);
    let mut eval = |p: &[f64], k: usize| -> Result<f64> {
        let v = objective(p)?;
        if !v.is_finite() {
            return Err(Error::Numerical(format!("SPSA objective returned {v} at iteration {k}")));
        }
        Ok(v)
    };
    for k in 0..cfg.iterations {
        let (ak, ck) = (cfg.a_k(k), cfg.c_k(k));
        let delta: Vec<f64> = (0..theta.len()).map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect();
        let mut plus: Vec<f64> = theta.iter().zip(&delta).map(|(t, d)| t + ck * d).collect();
        let mut minus: Vec<f64> = theta.iter().zip(&delta).map(|(t, d)| t - ck * d).collect();
        bp.project(&mut plus);
        bp.project(&mut minus);
        let g = (eval(&plus, k)? - eval(&minus, k)?) / (2.0 * ck);
        for (t, d) in theta.iter_mut().zip(&delta) {
            *t += ak * g / d;
        }
        bp.project(&mut theta);
    }
    bp.clone().with_params(theta)
}

/// Returned in place of the energy when the blueprint marks nothing.
pub const MARK_PENALTY: f64 = -1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveConfig {
    pub domain: Domain,
    pub f: Source,
    pub max_elements: usize,
    pub form: EstimatorForm,
    pub solver_tol: f64,
    /// Uniform refinements of the built-in mesh before the first solve. On the
    /// symmetric 6-element L-shape all indicators coincide, which a learned
    /// blueprint may read as nothing to mark.
    pub initial_refinements: usize,
}

impl Default for ObjectiveConfig {
    fn default() -> ObjectiveConfig {
        ObjectiveConfig {
            domain: Domain::LShape,
            f: Source::Constant(1.0),
            max_elements: 20_000,
            form: EstimatorForm::Classic,
            solver_tol: 1e-10,
            initial_refinements: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlueprintStep {
    pub n_elements: usize,
    /// (Σ ρ_T²)^{1/2}.
    pub estimator: f64,
    pub energy: f64,
    pub n_marked: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlueprintRun {
    pub steps: Vec<BlueprintStep>,
    /// The blueprint marked nothing on some step.
    pub stalled: bool,
}

/// Solve, estimate, mark with the blueprint on ρ_T = (ρ_T²)^{1/2}, refine,
/// while the mesh has at most `max_elements` elements.
pub fn run_blueprint_marking(bp: &Blueprint, cfg: &ObjectiveConfig) -> Result<BlueprintRun> {
    let mut mesh = Mesh::initial(cfg.domain);
    for _ in 0..cfg.initial_refinements {
        mesh = mesh.uniform_refine();
    }
    let mut steps = Vec::new();
    loop {
        let u = solve_poisson(&mesh, &cfg.f, cfg.solver_tol)?;
        let rho2 = residual_estimator(&mesh, &u, &cfg.f, cfg.form)?;
        let energy = energy_norm_sq(&mesh, &u)?;
        let rho: Vec<f64> = rho2.iter().map(|v| v.sqrt()).collect();
        let done = mesh.n_elements() > cfg.max_elements;
        let marked = if done { Vec::new() } else { blueprint_mark(bp, &rho) };
        steps.push(BlueprintStep {
            n_elements: mesh.n_elements(),
            estimator: rho2.iter().sum::<f64>().sqrt(),
            energy,
            n_marked: marked.len(),
        });
        if done {
            return Ok(BlueprintRun { steps, stalled: false });
        }
        if marked.is_empty() {
            return Ok(BlueprintRun { steps, stalled: true });
        }
        mesh = mesh.refine(&marked)?;
    }
}

/// Energy ‖∇U‖² on the finest mesh reached by blueprint marking, or
/// [`MARK_PENALTY`] when the run stalls.
pub fn marking_objective(bp: &Blueprint, params: &[f64], cfg: &ObjectiveConfig) -> Result<f64> {
    let b = bp.clone().with_params(params.to_vec())?;
    let run = run_blueprint_marking(&b, cfg)?;
    Ok(if run.stalled { MARK_PENALTY } else { run.steps.last().map_or(MARK_PENALTY, |s| s.energy) })
}

/// Per-element features: ∇U on the element and its three edge neighbours
/// (zero across the boundary), the vertex coordinates and f.
pub const TOTJ_FEATURES: usize = 15;

/// B with layers (16,10,10,10) and B′ with (11,10,1), each feeding back the
/// first component of its previous output.
pub fn totj_blueprint() -> Blueprint {
    let b = StageShape { input: TOTJ_FEATURES, recur: vec![0], layers: vec![10, 10, 10], link: Link::Plain };
    let b2 = StageShape { input: 10, recur: vec![0], layers: vec![10, 1], link: Link::Plain };
    Blueprint::new(vec![b, b2], true).expect("fixed architecture is consistent")
}

pub fn totj_features(mesh: &Mesh, u: &crate::fem::DiscreteSolution, f: &Source) -> Result<Vec<f64>> {
    let g = gradients(mesh, u)?;
    let nb = mesh.neighbors();
    let mut out = Vec::with_capacity(mesh.n_elements() * TOTJ_FEATURES);
    for t in 0..mesh.n_elements() {
        out.extend_from_slice(&g[t]);
        for o in nb[t] {
            out.extend_from_slice(&o.map_or([0.0; 2], |o| g[o]));
        }
        for p in mesh.coords(t) {
            out.extend_from_slice(&p);
        }
        out.push(f.on(mesh, t));
    }
    Ok(out)
}

/// The ⌈n/5⌉ largest entries, larger value first, earlier index first among equals.
pub fn top_fifth(y: &[f64]) -> Vec<usize> {
    let k = y.len().div_ceil(5);
    let mut order: Vec<usize> = (0..y.len()).collect();
    order.sort_by(|&a, &b| y[b].total_cmp(&y[a]).then(a.cmp(&b)));
    order.truncate(k);
    order.sort_unstable();
    order
}

#[derive(Clone, Debug, PartialEq)]
pub struct TotjConfig {
    pub n_train: usize,
    pub steps: usize,
    pub scale: f64,
    pub decay: f64,
    pub seed: u64,
    pub solver_tol: f64,
    pub form: EstimatorForm,
}

impl Default for TotjConfig {
    fn default() -> TotjConfig {
        TotjConfig { n_train: 50, steps: 15, scale: 0.1, decay: 0.95, seed: 0, solver_tol: 1e-10, form: EstimatorForm::Classic }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TotjRow {
    pub step: usize,
    pub n_elements: usize,
    pub energy: f64,
    pub estimator: f64,
    /// Trial-refinement energy of the kept parameters (NaN without training).
    pub candidate_best_objective: f64,
}

#[derive(Clone, Debug)]
pub struct TotjOutcome {
    pub meshes: Vec<Mesh>,
    pub blueprint: Blueprint,
    pub trace: Vec<TotjRow>,
}

pub fn totj_csv_header() -> &'static str {
    "step,n_elements,energy,estimator,candidate_best_objective"
}

impl TotjRow {
    pub fn csv(&self) -> String {
        format!("{},{},{:e},{:e},{:e}", self.step, self.n_elements, self.energy, self.estimator, self.candidate_best_objective)
    }
}

/// Alternates a best-of-`n_train` random perturbation search, scored by the
/// energy after refining the top fifth of a trial mesh, with the real
/// refinement of the top fifth under the kept parameters.
pub fn train_on_the_job(mesh0: &Mesh, f: &Source, bp: &Blueprint, cfg: &TotjConfig) -> Result<TotjOutcome> {
    if bp.input_size() != TOTJ_FEATURES {
        return Err(Error::Dimension(format!("blueprint reads {} features, expected {TOTJ_FEATURES}", bp.input_size())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut bp = bp.clone();
    let mut mesh = mesh0.clone();
    let mut meshes = vec![mesh.clone()];
    let mut trace = Vec::new();
    let mut scale = cfg.scale;
    for step in 0..=cfg.steps {
        let u = solve_poisson(&mesh, f, cfg.solver_tol)?;
        let energy = energy_norm_sq(&mesh, &u)?;
        let estimator = residual_estimator(&mesh, &u, f, cfg.form)?.iter().sum::<f64>().sqrt();
        let n = mesh.n_elements();
        let mut row = TotjRow { step, n_elements: n, energy, estimator, candidate_best_objective: f64::NAN };
        if step == cfg.steps {
            trace.push(row);
            break;
        }
        let x = totj_features(&mesh, &u, f)?;
        if cfg.n_train > 0 {
            let mut cands = vec![bp.params.clone()];
            for _ in 0..cfg.n_train {
                let mut p: Vec<f64> = bp.params.iter().map(|v| v + scale * rng.gen_range(-1.0..=1.0)).collect();
                bp.project(&mut p);
                cands.push(p);
            }
            let scores: Vec<Result<f64>> = cands
                .par_iter()
                .map(|p| {
                    let trial = mesh.refine(&top_fifth(&bp.eval_with(p, &x, n)))?;
                    let ut = solve_poisson(&trial, f, cfg.solver_tol)?;
                    energy_norm_sq(&trial, &ut)
                })
                .collect();
            let mut best = (0, f64::NEG_INFINITY);
            for (i, s) in scores.into_iter().enumerate() {
                let s = s?;
                if s > best.1 {
                    best = (i, s);
                }
            }
            bp.params = cands.swap_remove(best.0);
            row.candidate_best_objective = best.1;
            scale *= cfg.decay;
        }
        trace.push(row);
        mesh = mesh.refine(&top_fifth(&bp.eval(&x, n)))?;
        meshes.push(mesh.clone());
    }
    Ok(TotjOutcome { meshes, blueprint: bp, trace })
}
