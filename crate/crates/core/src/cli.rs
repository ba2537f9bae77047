//! Experiment drivers behind the `adaptnet` binary, plus CSV and SVG output.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fem::{energy_norm_sq, residual_estimator, solve_poisson, EstimatorForm, Source};
use crate::marking::{doerfler_mark, mark_iterations};
use crate::mesh::{Domain, Mesh, Point};
use crate::rnn_blocks::{build_adaptive_with, certify, encode_inputs, AdaptiveParams, FloatModel, MarkOutputs, Windows};
use crate::stochastic_greedy::{greedy_refine, stochastic_greedy_refine, GradientSurrogate, GreedyConfig, Sampler};
use crate::training::{
    maxstrategy_blueprint, marking_objective, run_blueprint_marking, spsa_optimize, totj_blueprint, train_on_the_job,
    ObjectiveConfig, FixtureWeights, SpsaConfig, TotjConfig,
};

/// Overrides the output directory from the config file.
pub const OUT_DIR_ENV: &str = "ADAPTNET_OUT_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    AdaptClassical,
    AdaptRnn,
    Uniform,
    Greedy,
    GreedyStochastic,
    TrainMaxstrategy,
    TrainOnTheJob,
    VerifyBlocks,
}

impl Command {
    pub const ALL: [Command; 8] = [
        Command::AdaptClassical,
        Command::AdaptRnn,
        Command::Uniform,
        Command::Greedy,
        Command::GreedyStochastic,
        Command::TrainMaxstrategy,
        Command::TrainOnTheJob,
        Command::VerifyBlocks,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::AdaptClassical => "adapt-classical",
            Command::AdaptRnn => "adapt-rnn",
            Command::Uniform => "uniform",
            Command::Greedy => "greedy",
            Command::GreedyStochastic => "greedy-stochastic",
            Command::TrainMaxstrategy => "train-maxstrategy",
            Command::TrainOnTheJob => "train-on-the-job",
            Command::VerifyBlocks => "verify-blocks",
        }
    }
}

impl FromStr for Command {
    type Err = Error;
    fn from_str(s: &str) -> Result<Command> {
        Command::ALL.into_iter().find(|c| c.name() == s).ok_or_else(|| Error::Validation(format!("unknown command `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SurrogateChoice {
    Corner,
    Smooth,
}

impl FromStr for SurrogateChoice {
    type Err = Error;
    fn from_str(s: &str) -> Result<SurrogateChoice> {
        match s {
            "corner" => Ok(SurrogateChoice::Corner),
            "smooth" => Ok(SurrogateChoice::Smooth),
            _ => Err(Error::Validation(format!("unknown surrogate `{s}`"))),
        }
    }
}

impl SurrogateChoice {
    pub fn build(self) -> GradientSurrogate {
        match self {
            SurrogateChoice::Corner => GradientSurrogate::corner_singularity(),
            SurrogateChoice::Smooth => GradientSurrogate::smooth(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub command: Command,
    pub domain: Domain,
    pub theta: f64,
    pub eps: f64,
    pub eps_tol: f64,
    pub max_elements: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub form: EstimatorForm,
    /// Constant right-hand side.
    pub f: f64,
    pub threads: Option<usize>,
    /// Uniform refinements of the built-in mesh; None picks the command default.
    pub initial_refinements: Option<usize>,
    /// Draws per element (K) and points per draw (N) of the stochastic greedy run.
    pub draws: usize,
    pub points: usize,
    pub m: usize,
    pub surrogate: SurrogateChoice,
    pub n_train: usize,
    pub steps: usize,
    pub init_gain: f64,
    pub fixture: bool,
    pub spsa_iterations: usize,
    /// A-priori bound on the squared indicators, sizing the pivot search of MARK.
    pub rho_bound: f64,
    pub samples: usize,
    pub svg: bool,
}

impl ExperimentConfig {
    pub fn new(command: Command) -> ExperimentConfig {
        let domain = if command == Command::TrainOnTheJob { Domain::ZShape } else { Domain::LShape };
        ExperimentConfig {
            command,
            domain,
            theta: 0.5,
            eps: 1e-9,
            eps_tol: 1e-6,
            max_elements: 20_000,
            seed: 0,
            out_dir: PathBuf::from("out"),
            form: EstimatorForm::Classic,
            f: 1.0,
            threads: None,
            initial_refinements: None,
            draws: 8,
            points: 1,
            m: 1,
            surrogate: SurrogateChoice::Corner,
            n_train: 50,
            steps: 15,
            init_gain: 0.1,
            fixture: true,
            spsa_iterations: 200,
            rho_bound: 1e3,
            samples: 10_000,
            svg: true,
        }
    }

    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim().parse().map_err(|_| Error::Validation(format!("`{v}` is not a valid value for {key}")))
        }
        let v = value.trim();
        match key {
            "command" => self.command = v.parse()?,
            "domain" => self.domain = v.parse()?,
            "theta" => self.theta = num(key, v)?,
            "eps" => self.eps = num(key, v)?,
            "eps_tol" => self.eps_tol = num(key, v)?,
            "max_elements" => self.max_elements = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            "form" => self.form = v.parse()?,
            "f" => self.f = num(key, v)?,
            "threads" => self.threads = Some(num(key, v)?),
            "initial_refinements" => self.initial_refinements = Some(num(key, v)?),
            "draws" => self.draws = num(key, v)?,
            "points" => self.points = num(key, v)?,
            "m" => self.m = num(key, v)?,
            "surrogate" => self.surrogate = v.parse()?,
            "n_train" => self.n_train = num(key, v)?,
            "steps" => self.steps = num(key, v)?,
            "init_gain" => self.init_gain = num(key, v)?,
            "fixture" => self.fixture = num(key, v)?,
            "spsa_iterations" => self.spsa_iterations = num(key, v)?,
            "rho_bound" => self.rho_bound = num(key, v)?,
            "samples" => self.samples = num(key, v)?,
            "svg" => self.svg = num(key, v)?,
            _ => return Err(Error::Validation(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Validation(m.into()));
        if !(self.theta > 0.0 && self.theta < 1.0) {
            return bad("theta must lie in (0,1)");
        }
        if !(self.eps > 0.0) || !(self.eps_tol > 0.0) {
            return bad("eps and eps_tol must be positive");
        }
        if self.max_elements == 0 {
            return bad("max_elements must be positive");
        }
        if !self.f.is_finite() {
            return bad("f must be finite");
        }
        if self.threads == Some(0) {
            return bad("threads must be at least 1");
        }
        if self.draws == 0 || self.points == 0 || self.m == 0 {
            return bad("draws, points and m must be at least 1");
        }
        if !(self.init_gain > 0.0) || !(self.rho_bound > 0.0) {
            return bad("init_gain and rho_bound must be positive");
        }
        if self.samples == 0 {
            return bad("samples must be at least 1");
        }
        Ok(())
    }

    pub fn source(&self) -> Source {
        Source::Constant(self.f)
    }

    fn initial_mesh(&self) -> Mesh {
        let pre = self.initial_refinements.unwrap_or(match self.command {
            Command::TrainMaxstrategy => 1,
            Command::TrainOnTheJob => 2,
            _ => 0,
        });
        let mut m = Mesh::initial(self.domain);
        for _ in 0..pre {
            m = m.uniform_refine();
        }
        m
    }
}

/// Flat `key = value` lines; `#` starts a comment.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse { line: i + 1, msg: format!("expected key=value, got `{line}`") })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Defaults, then the config file, then the output-directory variable, then flags.
pub fn resolve_config(
    command: Command,
    file: Option<&str>,
    env_out_dir: Option<&str>,
    flags: &[(String, String)],
) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::new(command);
    if let Some(text) = file {
        for (k, v) in parse_config_text(text)? {
            if k == "command" || k == "config" {
                continue;
            }
            cfg.set(&k, &v)?;
        }
    }
    if let Some(d) = env_out_dir {
        cfg.set("out_dir", d)?;
    }
    for (k, v) in flags {
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvergenceRecord {
    pub step: usize,
    pub n_elements: usize,
    /// (Σ ρ_T²)^{1/2}, or the largest indicator for greedy runs.
    pub estimator: f64,
    pub energy: f64,
    pub time_ms: f64,
}

pub const CSV_HEADER: &str = "step,n_elements,estimator,energy,time_ms";

pub fn csv_text(records: &[ConvergenceRecord]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in records {
        let _ = writeln!(s, "{},{},{},{},{}", r.step, r.n_elements, r.estimator, r.energy, r.time_ms);
    }
    s
}

pub fn emit_csv(records: &[ConvergenceRecord], path: &Path) -> Result<()> {
    std::fs::write(path, csv_text(records))?;
    Ok(())
}

pub fn parse_csv(text: &str) -> Result<Vec<ConvergenceRecord>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == CSV_HEADER => {}
        _ => return Err(Error::Parse { line: 1, msg: format!("expected header `{CSV_HEADER}`") }),
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        let err = || Error::Parse { line: i + 1, msg: format!("bad record `{line}`") };
        if f.len() != 5 {
            return Err(err());
        }
        out.push(ConvergenceRecord {
            step: f[0].parse().map_err(|_| err())?,
            n_elements: f[1].parse().map_err(|_| err())?,
            estimator: f[2].parse().map_err(|_| err())?,
            energy: f[3].parse().map_err(|_| err())?,
            time_ms: f[4].parse().map_err(|_| err())?,
        });
    }
    Ok(out)
}

pub fn read_csv(path: &Path) -> Result<Vec<ConvergenceRecord>> {
    parse_csv(&std::fs::read_to_string(path)?)
}

/// Least-squares slope of log₁₀ estimator against log₁₀ #T over records with #T ≥ 10³.
pub fn fit_slope(records: &[ConvergenceRecord]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = records
        .iter()
        .filter(|r| r.n_elements >= 1000 && r.estimator > 0.0)
        .map(|r| ((r.n_elements as f64).log10(), r.estimator.log10()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    Some(pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / sxx)
}

fn color(t: f64) -> String {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let r = (255.0 * t).round() as u8;
    let b = (255.0 * (1.0 - t)).round() as u8;
    format!("rgb({r},{},{b})", 96)
}

/// One polygon per triangle, viewBox fitted to the bounding box, optional fill by a scalar per triangle.
pub fn svg_text(tris: &[[Point; 3]], field: Option<&[f64]>) -> Result<String> {
    if let Some(f) = field {
        if f.len() != tris.len() {
            return Err(Error::Dimension(format!("{} field values for {} elements", f.len(), tris.len())));
        }
    }
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in tris.iter().flatten() {
        for d in 0..2 {
            lo[d] = lo[d].min(p[d]);
            hi[d] = hi[d].max(p[d]);
        }
    }
    if tris.is_empty() {
        (lo, hi) = ([0.0; 2], [1.0; 2]);
    }
    let (w, h) = ((hi[0] - lo[0]).max(1e-12), (hi[1] - lo[1]).max(1e-12));
    let pad = 0.02 * w.max(h);
    let stroke = 0.002 * w.max(h);
    let (fmin, fmax) = field.map_or((0.0, 1.0), |f| {
        f.iter().filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)))
    });
    let mut s = String::new();
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"{} {} {} {}\">",
        lo[0] - pad,
        -hi[1] - pad,
        w + 2.0 * pad,
        h + 2.0 * pad
    );
    for (i, t) in tris.iter().enumerate() {
        let fill = match field {
            Some(f) => color(if fmax > fmin { (f[i] - fmin) / (fmax - fmin) } else { 0.5 }),
            None => "none".to_string(),
        };
        let pts: Vec<String> = t.iter().map(|p| format!("{},{}", p[0], -p[1])).collect();
        let _ = writeln!(s, "<polygon points=\"{}\" fill=\"{fill}\" stroke=\"black\" stroke-width=\"{stroke}\"/>", pts.join(" "));
    }
    s.push_str("</svg>\n");
    Ok(s)
}

pub fn emit_svg(mesh: &Mesh, field: Option<&[f64]>, path: &Path) -> Result<()> {
    let tris: Vec<[Point; 3]> = (0..mesh.n_elements()).map(|t| mesh.coords(t)).collect();
    std::fs::write(path, svg_text(&tris, field)?)?;
    Ok(())
}

/// Outcome of an adaptive loop: records and the final mesh with its indicators.
#[derive(Clone, Debug)]
pub struct AdaptRun {
    pub records: Vec<ConvergenceRecord>,
    pub mesh: Mesh,
    pub indicators: Vec<f64>,
}

impl AdaptRun {
    pub fn slope(&self) -> Option<f64> {
        fit_slope(&self.records)
    }
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Solve, estimate, then `mark` (None stops); stops after the first mesh
/// with more than `max_elements` elements or once the estimator reaches eps_tol.
fn adapt_loop(
    cfg: &ExperimentConfig,
    mut mesh: Mesh,
    mut mark: impl FnMut(usize, &Mesh, &crate::fem::DiscreteSolution, &[f64]) -> Result<Option<Vec<usize>>>,
) -> Result<AdaptRun> {
    let f = cfg.source();
    let start = Instant::now();
    let mut records = Vec::new();
    for step in 0.. {
        let ctx = |e: Error| match e {
            Error::Solver { .. } | Error::Numerical(_) => Error::Numerical(format!("step {step}: {e}")),
            e => e,
        };
        let u = solve_poisson(&mesh, &f, 1e-10).map_err(ctx)?;
        let rho2 = residual_estimator(&mesh, &u, &f, cfg.form)?;
        let est = rho2.iter().sum::<f64>().sqrt();
        records.push(ConvergenceRecord { step, n_elements: mesh.n_elements(), estimator: est, energy: energy_norm_sq(&mesh, &u)?, time_ms: ms(start) });
        if mesh.n_elements() > cfg.max_elements || est <= cfg.eps_tol {
            return Ok(AdaptRun { records, mesh, indicators: rho2 });
        }
        match mark(step, &mesh, &u, &rho2).map_err(ctx)? {
            Some(m) if !m.is_empty() => mesh = mesh.refine(&m)?,
            _ => return Ok(AdaptRun { records, mesh, indicators: rho2 }),
        }
    }
    unreachable!()
}

/// Dörfler marking on the squared indicators.
pub fn run_adapt_classical(cfg: &ExperimentConfig) -> Result<AdaptRun> {
    adapt_loop(cfg, cfg.initial_mesh(), |_, _, _, rho2| Ok(Some(doerfler_mark(rho2, cfg.theta)?.indices)))
}

pub fn run_uniform(cfg: &ExperimentConfig) -> Result<AdaptRun> {
    adapt_loop(cfg, cfg.initial_mesh(), |_, m, _, _| Ok(Some((0..m.n_elements()).collect())))
}

/// Per-step comparison of the network's marks with classical Dörfler marking.
#[derive(Clone, Debug, PartialEq)]
pub struct MarkComparison {
    pub step: usize,
    pub n_elements: usize,
    pub n_marked_rnn: usize,
    pub n_marked_classical: usize,
    /// Elements marked by exactly one of the two.
    pub n_mismatch: usize,
    /// Elements within eps/#T of the classical Dörfler threshold.
    pub band: usize,
}

pub const MARKS_CSV_HEADER: &str = "step,n_elements,n_marked_rnn,n_marked_classical,n_mismatch,band";

#[derive(Clone, Debug)]
pub struct RnnRun {
    pub run: AdaptRun,
    pub marks: Vec<MarkComparison>,
    /// The network marked nothing while the estimator was above eps_tol, or
    /// exactly at the first step where Σρ̃² ≤ eps_tol².
    pub stopped_by_network: bool,
}

/// The loop with estimate and mark done by the network ADAPTIVE, rebuilt
/// each step for the current #T.
pub fn run_adapt_rnn(cfg: &ExperimentConfig) -> Result<RnnRun> {
    let f = cfg.source();
    let mut marks = Vec::new();
    let mut stopped = false;
    let run = adapt_loop(cfg, cfg.initial_mesh(), |step, mesh, u, rho2| {
        let n = mesh.n_elements();
        let recs = encode_inputs(mesh, u, &f)?;
        let p = AdaptiveParams {
            theta: cfg.theta,
            eps: cfg.eps,
            eps_tol: cfg.eps_tol,
            n: AdaptiveParams::accuracy_for(n, cfg.eps),
            k: mark_iterations(cfg.rho_bound, n, cfg.eps),
        };
        let net = build_adaptive_with(&p, Windows::fit(&recs), FloatModel::default())?;
        let flat: Vec<f64> = recs.iter().flatten().copied().collect();
        let out = net.eval_flat(&flat, n);
        let so = net.output_size();
        let got: Vec<usize> = (0..n).filter(|&i| out[i * so + MarkOutputs::MARK] > 0.0).collect();
        // cross-check against the fem estimator in the same form
        let fem = if cfg.form == EstimatorForm::DiamInf { rho2.to_vec() } else { residual_estimator(mesh, u, &f, EstimatorForm::DiamInf)? };
        let want = doerfler_mark(&fem, cfg.theta)?.indices;
        let cut = want.iter().map(|&i| fem[i]).fold(f64::INFINITY, f64::min);
        let tol = cfg.eps / n as f64;
        let mut in_got = vec![false; n];
        got.iter().for_each(|&i| in_got[i] = true);
        let mut in_want = vec![false; n];
        want.iter().for_each(|&i| in_want[i] = true);
        marks.push(MarkComparison {
            step,
            n_elements: n,
            n_marked_rnn: got.len(),
            n_marked_classical: want.len(),
            n_mismatch: (0..n).filter(|&i| in_got[i] != in_want[i]).count(),
            band: if cut.is_finite() { fem.iter().filter(|&&v| (v - cut).abs() <= tol).count() } else { 0 },
        });
        if got.is_empty() {
            stopped = true;
        }
        Ok(Some(got))
    })?;
    Ok(RnnRun { run, marks, stopped_by_network: stopped })
}

pub fn marks_csv_text(rows: &[MarkComparison]) -> String {
    let mut s = format!("{MARKS_CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{},{}", r.step, r.n_elements, r.n_marked_rnn, r.n_marked_classical, r.n_mismatch, r.band);
    }
    s
}

#[derive(Clone, Debug)]
pub struct GreedyRun {
    pub records: Vec<ConvergenceRecord>,
    pub tris: Vec<[Point; 3]>,
    pub generations: Vec<crate::stochastic_greedy::GenerationRow>,
}

/// Deterministic greedy refinement at eps_tol.
pub fn run_greedy(cfg: &ExperimentConfig) -> Result<GreedyRun> {
    let v = cfg.surrogate.build();
    let mesh0 = cfg.initial_mesh();
    let start = Instant::now();
    let eta0 = (0..mesh0.n_elements()).map(|t| crate::stochastic_greedy::eta(&mesh0, t, &v)).fold(0.0, f64::max);
    let mut records = vec![ConvergenceRecord { step: 0, n_elements: mesh0.n_elements(), estimator: eta0, energy: f64::NAN, time_ms: 0.0 }];
    let nc = greedy_refine(&mesh0, &v, cfg.eps_tol)?;
    let tris: Vec<[Point; 3]> = nc.leaves.iter().map(|l| l.0).collect();
    let eta_max = tris.iter().map(|p| crate::stochastic_greedy::eta_tri(p, &v)).fold(0.0, f64::max);
    if nc.n_elements() != mesh0.n_elements() {
        records.push(ConvergenceRecord { step: 1, n_elements: nc.n_elements(), estimator: eta_max, energy: f64::NAN, time_ms: ms(start) });
    }
    Ok(GreedyRun { records, tris, generations: Vec::new() })
}

/// Monte-Carlo stochastic greedy refinement at eps_tol with K = draws, N = points.
pub fn run_greedy_stochastic(cfg: &ExperimentConfig) -> Result<GreedyRun> {
    let v = cfg.surrogate.build();
    let mesh0 = cfg.initial_mesh();
    let gc = GreedyConfig { eps: cfg.eps_tol, k: cfg.draws, n: cfg.points, m: cfg.m, seed: cfg.seed };
    let out = stochastic_greedy_refine(&mesh0, &Sampler::MonteCarlo(&v), &gc)?;
    let records = out
        .trace
        .iter()
        .map(|g| ConvergenceRecord { step: g.generation, n_elements: g.n_elements, estimator: g.max_eta, energy: f64::NAN, time_ms: f64::NAN })
        .collect();
    let tris = (0..out.mesh.n_elements()).map(|t| out.mesh.coords(t)).collect();
    Ok(GreedyRun { records, tris, generations: out.trace })
}

#[derive(Clone, Debug)]
pub struct MaxStrategyRun {
    pub records: Vec<ConvergenceRecord>,
    pub params: Vec<f64>,
    pub trained: bool,
    pub stalled: bool,
}

/// Marks with the maximum-strategy blueprint: the fixture weights, or SPSA
/// from a random start on the finest-mesh energy.
pub fn run_train_maxstrategy(cfg: &ExperimentConfig) -> Result<MaxStrategyRun> {
    let oc = ObjectiveConfig {
        domain: cfg.domain,
        f: cfg.source(),
        max_elements: cfg.max_elements,
        form: cfg.form,
        solver_tol: 1e-10,
        initial_refinements: cfg.initial_refinements.unwrap_or(1),
    };
    let bp = if cfg.fixture {
        FixtureWeights::blueprint()
    } else {
        let mut bp = maxstrategy_blueprint();
        bp.randomize(&mut ChaCha8Rng::seed_from_u64(cfg.seed), 1.0);
        let sc = SpsaConfig { iterations: cfg.spsa_iterations, seed: cfg.seed, ..SpsaConfig::default() };
        let base = bp.clone();
        spsa_optimize(&bp, |p| marking_objective(&base, p, &oc), &sc)?
    };
    let run = run_blueprint_marking(&bp, &oc)?;
    let records = run
        .steps
        .iter()
        .enumerate()
        .map(|(i, s)| ConvergenceRecord { step: i, n_elements: s.n_elements, estimator: s.estimator, energy: s.energy, time_ms: f64::NAN })
        .collect();
    Ok(MaxStrategyRun { records, params: bp.params, trained: !cfg.fixture, stalled: run.stalled })
}

#[derive(Clone, Debug)]
pub struct TotjRun {
    pub learned: Vec<ConvergenceRecord>,
    pub uniform: Vec<ConvergenceRecord>,
    pub trace: Vec<crate::training::TotjRow>,
    pub final_mesh: Mesh,
}

impl TotjRun {
    /// Uniform estimator at the learned final #T, interpolated in log-log.
    pub fn uniform_at_final(&self) -> Option<f64> {
        let l = self.learned.last()?;
        let x = (l.n_elements as f64).ln();
        self.uniform.windows(2).find_map(|w| {
            let (a, b) = ((w[0].n_elements as f64).ln(), (w[1].n_elements as f64).ln());
            (a <= x && x <= b).then(|| {
                let (ya, yb) = (w[0].estimator.ln(), w[1].estimator.ln());
                (ya + (yb - ya) * (x - a) / (b - a)).exp()
            })
        })
    }

    pub fn learned_slope(&self) -> Option<f64> {
        fit_slope(&self.learned)
    }

    pub fn uniform_slope(&self) -> Option<f64> {
        fit_slope(&self.uniform)
    }
}

/// Training on the job from a random start, and uniform refinement of the
/// same initial mesh up to the first mesh at least as large as the learned one.
pub fn run_train_on_the_job(cfg: &ExperimentConfig) -> Result<TotjRun> {
    let f = cfg.source();
    let mesh0 = cfg.initial_mesh();
    let mut bp = totj_blueprint();
    bp.randomize(&mut ChaCha8Rng::seed_from_u64(cfg.seed), cfg.init_gain);
    let tc = TotjConfig { n_train: cfg.n_train, steps: cfg.steps, seed: cfg.seed, form: cfg.form, ..TotjConfig::default() };
    let out = train_on_the_job(&mesh0, &f, &bp, &tc)?;
    let learned: Vec<ConvergenceRecord> = out
        .trace
        .iter()
        .map(|r| ConvergenceRecord { step: r.step, n_elements: r.n_elements, estimator: r.estimator, energy: r.energy, time_ms: f64::NAN })
        .collect();
    let target = learned.last().map_or(0, |r| r.n_elements);
    let mut mesh = mesh0;
    let mut uniform = Vec::new();
    for step in 0.. {
        let u = solve_poisson(&mesh, &f, 1e-10)?;
        let est = residual_estimator(&mesh, &u, &f, cfg.form)?.iter().sum::<f64>().sqrt();
        uniform.push(ConvergenceRecord { step, n_elements: mesh.n_elements(), estimator: est, energy: energy_norm_sq(&mesh, &u)?, time_ms: f64::NAN });
        if mesh.n_elements() >= target {
            break;
        }
        mesh = mesh.uniform_refine();
    }
    let final_mesh = out.meshes.last().cloned().expect("at least the initial mesh");
    Ok(TotjRun { learned, uniform, trace: out.trace, final_mesh })
}

pub fn certificates(cfg: &ExperimentConfig) -> Vec<certify::Certificate> {
    [2usize, 4, 6, 8].iter().flat_map(|&n| certify::certify(n, cfg.samples, cfg.seed)).collect()
}

/// Text printed by the binary, one line per fact.
#[derive(Clone, Debug, Default)]
pub struct Report {
    pub lines: Vec<String>,
    pub files: Vec<PathBuf>,
}

fn slope_line(name: &str, s: Option<f64>) -> String {
    match s {
        Some(s) => format!("{name} slope (#T >= 1000): {s:.4}"),
        None => format!("{name} slope: fewer than two records with #T >= 1000"),
    }
}

/// Runs the configured command and writes its files.
pub fn run(cfg: &ExperimentConfig) -> Result<Report> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    let mut rep = Report::default();
    let dir = cfg.out_dir.clone();
    let write = |rep: &mut Report, name: &str, text: String| -> Result<()> {
        let p = dir.join(name);
        std::fs::write(&p, text)?;
        rep.files.push(p);
        Ok(())
    };
    let stem = cfg.command.name().replace('-', "_");
    match cfg.command {
        Command::AdaptClassical | Command::Uniform => {
            let run = if cfg.command == Command::Uniform { run_uniform(cfg)? } else { run_adapt_classical(cfg)? };
            write(&mut rep, &format!("{stem}.csv"), csv_text(&run.records))?;
            if cfg.svg {
                let tris: Vec<_> = (0..run.mesh.n_elements()).map(|t| run.mesh.coords(t)).collect();
                let field: Vec<f64> = run.indicators.iter().map(|v| v.max(1e-300).log10()).collect();
                write(&mut rep, &format!("{stem}_mesh.svg"), svg_text(&tris, Some(&field))?)?;
            }
            rep.lines.push(format!("{} steps, final #T = {}", run.records.len(), run.mesh.n_elements()));
            rep.lines.push(slope_line(cfg.command.name(), run.slope()));
        }
        Command::AdaptRnn => {
            let r = run_adapt_rnn(cfg)?;
            write(&mut rep, &format!("{stem}.csv"), csv_text(&r.run.records))?;
            write(&mut rep, &format!("{stem}_marks.csv"), marks_csv_text(&r.marks))?;
            if cfg.svg {
                let tris: Vec<_> = (0..r.run.mesh.n_elements()).map(|t| r.run.mesh.coords(t)).collect();
                write(&mut rep, &format!("{stem}_mesh.svg"), svg_text(&tris, None)?)?;
            }
            let mism: usize = r.marks.iter().map(|m| m.n_mismatch).sum();
            let band: usize = r.marks.iter().map(|m| m.band).sum();
            rep.lines.push(format!("{} steps, final #T = {}", r.run.records.len(), r.run.mesh.n_elements()));
            rep.lines.push(format!("marks differing from classical: {mism} (band occupancy {band})"));
            if r.stopped_by_network {
                rep.lines.push("stopped by the network".into());
            }
            rep.lines.push(slope_line("adapt-rnn", r.run.slope()));
        }
        Command::Greedy | Command::GreedyStochastic => {
            let r = if cfg.command == Command::Greedy { run_greedy(cfg)? } else { run_greedy_stochastic(cfg)? };
            write(&mut rep, &format!("{stem}.csv"), csv_text(&r.records))?;
            if !r.generations.is_empty() {
                let mut s = String::from("generation,n_elements,n_marked,n_stopped,max_eta\n");
                for g in &r.generations {
                    let _ = writeln!(s, "{},{},{},{},{}", g.generation, g.n_elements, g.n_marked, g.n_stopped, g.max_eta);
                }
                write(&mut rep, &format!("{stem}_generations.csv"), s)?;
            }
            if cfg.svg {
                write(&mut rep, &format!("{stem}_mesh.svg"), svg_text(&r.tris, None)?)?;
            }
            rep.lines.push(format!("final #T = {}", r.tris.len()));
        }
        Command::TrainMaxstrategy => {
            let r = run_train_maxstrategy(cfg)?;
            write(&mut rep, &format!("{stem}.csv"), csv_text(&r.records))?;
            let w: Vec<String> = r.params.iter().map(|v| v.to_string()).collect();
            write(&mut rep, &format!("{stem}_weights.txt"), w.join("\n") + "\n")?;
            rep.lines.push(format!("{} weights", if r.trained { "trained" } else { "fixture" }));
            if r.stalled {
                rep.lines.push("the blueprint marked nothing; run stalled".into());
            }
            rep.lines.push(slope_line("train-maxstrategy", fit_slope(&r.records)));
        }
        Command::TrainOnTheJob => {
            let r = run_train_on_the_job(cfg)?;
            write(&mut rep, "train_on_the_job_learned.csv", csv_text(&r.learned))?;
            write(&mut rep, "train_on_the_job_uniform.csv", csv_text(&r.uniform))?;
            let mut s = format!("{}\n", crate::training::totj_csv_header());
            for t in &r.trace {
                s.push_str(&t.csv());
                s.push('\n');
            }
            write(&mut rep, "train_on_the_job_trace.csv", s)?;
            if cfg.svg {
                let tris: Vec<_> = (0..r.final_mesh.n_elements()).map(|t| r.final_mesh.coords(t)).collect();
                write(&mut rep, "train_on_the_job_mesh.svg", svg_text(&tris, None)?)?;
            }
            rep.lines.push(slope_line("learned", r.learned_slope()));
            rep.lines.push(slope_line("uniform", r.uniform_slope()));
            if let (Some(l), Some(u)) = (r.learned.last(), r.uniform_at_final()) {
                rep.lines.push(format!("final #T = {}: learned estimator {:.4e}, uniform {:.4e}", l.n_elements, l.estimator, u));
            }
        }
        Command::VerifyBlocks => {
            let certs = certificates(cfg);
            let mut s = String::from("block,n,max_error,bound,pass\n");
            rep.lines.push(certify::header());
            for c in &certs {
                let _ = writeln!(s, "{},{},{:e},{:e},{}", c.block, c.n, c.max_error, c.bound, c.pass());
                rep.lines.push(c.to_string());
            }
            write(&mut rep, "certificates.csv", s)?;
            if let Some(c) = certs.iter().find(|c| !c.pass()) {
                return Err(Error::Numerical(format!("{} at n = {} exceeds its bound", c.block, c.n)));
            }
        }
    }
    Ok(rep)
}

/// Key/value pairs from flags, skipping unset ones.
pub fn flag_pairs(pairs: BTreeMap<&str, Option<String>>) -> Vec<(String, String)> {
    pairs.into_iter().filter_map(|(k, v)| v.map(|v| (k.to_string(), v))).collect()
}
