//! Greedy refinement driven by the local best-approximation error of a
//! gradient field, its Monte-Carlo counterpart with stop sets, and the
//! network form of the sampled indicator.

use crate::error::{Error, Result};
use crate::mesh::{Lineage, Mesh, Point};
use crate::rnn_blocks::lanes::{emit_max, emit_products, materialize};
use crate::rnn_core::{BasicRnn, DeepRnn, Dnn, NetBuilder, Node, Scale};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::collections::{BinaryHeap, HashSet};
use std::sync::Arc;

pub const GREEDY_STEP_CAP: usize = 100_000;
pub const STOCHASTIC_GENERATION_CAP: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SurrogateKind {
    Analytic,
    Network,
}

/// A vector field V approximating ∇u.
#[derive(Clone)]
pub struct GradientSurrogate {
    eval: Arc<dyn Fn(Point) -> [f64; 2] + Send + Sync>,
    pub kind: SurrogateKind,
    pub linf_bound: f64,
}

impl std::fmt::Debug for GradientSurrogate {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GradientSurrogate").field("kind", &self.kind).field("linf_bound", &self.linf_bound).finish()
    }
}

impl GradientSurrogate {
    pub fn analytic(linf_bound: f64, f: impl Fn(Point) -> [f64; 2] + Send + Sync + 'static) -> GradientSurrogate {
        GradientSurrogate { eval: Arc::new(f), kind: SurrogateKind::Analytic, linf_bound }
    }

    /// Wraps a network with two inputs and two outputs.
    pub fn network(net: Dnn, linf_bound: f64) -> Result<GradientSurrogate> {
        if net.input_size() != 2 || net.output_size() != 2 {
            return Err(Error::Dimension(format!(
                "gradient network maps {} to {} values, expected 2 to 2",
                net.input_size(),
                net.output_size()
            )));
        }
        let eval = move |p: Point| {
            let y = net.eval(&p).expect("checked dimensions");
            [y[0], y[1]]
        };
        Ok(GradientSurrogate { eval: Arc::new(eval), kind: SurrogateKind::Network, linf_bound })
    }

    pub fn constant(v: [f64; 2]) -> GradientSurrogate {
        GradientSurrogate::analytic(v[0].abs().max(v[1].abs()), move |_| v)
    }

    /// ∇ of r^{2/3} sin(2φ/3) with φ ∈ [0, 2π) measured from the positive x axis,
    /// the corner singularity of the L-shape at the origin.
    pub fn corner_singularity() -> GradientSurrogate {
        GradientSurrogate::analytic(f64::INFINITY, |p| {
            let r = p[0].hypot(p[1]);
            if r == 0.0 {
                return [0.0, 0.0];
            }
            let mut phi = p[1].atan2(p[0]);
            if phi < 0.0 {
                phi += 2.0 * std::f64::consts::PI;
            }
            let c = 2.0 / 3.0 * r.powf(-1.0 / 3.0);
            let (ur, ut) = (c * (2.0 * phi / 3.0).sin(), c * (2.0 * phi / 3.0).cos());
            let (cp, sp) = (phi.cos(), phi.sin());
            [ur * cp - ut * sp, ur * sp + ut * cp]
        })
    }

    /// ∇(x²y + sin(πx)·y²/2).
    pub fn smooth() -> GradientSurrogate {
        use std::f64::consts::PI;
        GradientSurrogate::analytic(4.0 + PI, |p| {
            let (x, y) = (p[0], p[1]);
            [2.0 * x * y + PI * (PI * x).cos() * y * y / 2.0, x * x + (PI * x).sin() * y]
        })
    }

    pub fn eval(&self, p: Point) -> [f64; 2] {
        (self.eval)(p)
    }

    pub fn scaled(&self, lambda: f64) -> GradientSurrogate {
        let inner = self.eval.clone();
        GradientSurrogate {
            eval: Arc::new(move |p| {
                let v = inner(p);
                [lambda * v[0], lambda * v[1]]
            }),
            kind: self.kind,
            linf_bound: self.linf_bound * lambda.abs(),
        }
    }
}

fn area(p: &[Point; 3]) -> f64 {
    0.5 * ((p[1][0] - p[0][0]) * (p[2][1] - p[0][1]) - (p[2][0] - p[0][0]) * (p[1][1] - p[0][1])).abs()
}

fn map(p: &[Point; 3], s: f64, t: f64) -> Point {
    [
        p[0][0] + s * (p[1][0] - p[0][0]) + t * (p[2][0] - p[0][0]),
        p[0][1] + s * (p[1][1] - p[0][1]) + t * (p[2][1] - p[0][1]),
    ]
}

// degree-5 seven-point rule on the reference triangle, weights summing to 1
const DUNAVANT5: [(f64, f64, f64); 7] = [
    (1.0 / 3.0, 1.0 / 3.0, 0.225),
    (0.059_715_871_789_770, 0.470_142_064_105_115, 0.132_394_152_788_506),
    (0.470_142_064_105_115, 0.059_715_871_789_770, 0.132_394_152_788_506),
    (0.470_142_064_105_115, 0.470_142_064_105_115, 0.132_394_152_788_506),
    (0.797_426_985_353_087, 0.101_286_507_323_456, 0.125_939_180_544_827),
    (0.101_286_507_323_456, 0.797_426_985_353_087, 0.125_939_180_544_827),
    (0.101_286_507_323_456, 0.101_286_507_323_456, 0.125_939_180_544_827),
];

const QUAD_SPLIT: usize = 4;

/// Points and weights (summing to |T|) of a composite rule: the triangle cut
/// into QUAD_SPLIT² congruent pieces, the degree-5 rule on each.
fn quadrature(p: &[Point; 3]) -> Vec<(Point, f64)> {
    let m = QUAD_SPLIT;
    let h = 1.0 / m as f64;
    let w0 = area(p) / (m * m) as f64;
    let mut out = Vec::with_capacity(7 * m * m);
    for i in 0..m {
        for j in 0..m - i {
            let (s0, t0) = (i as f64 * h, j as f64 * h);
            // upright piece
            for &(a, b, w) in &DUNAVANT5 {
                out.push((map(p, s0 + a * h, t0 + b * h), w * w0));
            }
            if i + j + 1 < m {
                // inverted piece with corners (s0+h,t0), (s0,t0+h), (s0+h,t0+h)
                for &(a, b, w) in &DUNAVANT5 {
                    out.push((map(p, s0 + h - b * h, t0 + h - a * h), w * w0));
                }
            }
        }
    }
    out
}

/// η(T,V) on the triangle with corners `p`.
pub fn eta_tri(p: &[Point; 3], v: &GradientSurrogate) -> f64 {
    let q = quadrature(p);
    // centred on the first value so constant fields give exactly zero
    let v0 = v.eval(q[0].0);
    let vals: Vec<[f64; 2]> = q
        .iter()
        .map(|(x, _)| {
            let e = v.eval(*x);
            [e[0] - v0[0], e[1] - v0[1]]
        })
        .collect();
    let a: f64 = q.iter().map(|(_, w)| w).sum();
    let mut mean = [0.0; 2];
    for ((_, w), val) in q.iter().zip(&vals) {
        mean[0] += w * val[0];
        mean[1] += w * val[1];
    }
    mean = [mean[0] / a, mean[1] / a];
    let mut s = 0.0;
    for ((_, w), val) in q.iter().zip(&vals) {
        s += w * ((val[0] - mean[0]).powi(2) + (val[1] - mean[1]).powi(2));
    }
    s.sqrt()
}

/// η(T,V) = ‖V − Π⁰_T V‖_{L²(T)}, root-sum-square over the two components.
pub fn eta(mesh: &Mesh, eid: usize, v: &GradientSurrogate) -> f64 {
    eta_tri(&mesh.coords(eid), v)
}

/// Uniform point on the triangle.
pub fn sample_point(p: &[Point; 3], rng: &mut impl Rng) -> Point {
    let (mut s, mut t): (f64, f64) = (rng.gen(), rng.gen());
    if s + t > 1.0 {
        s = 1.0 - s;
        t = 1.0 - t;
    }
    map(p, s, t)
}

/// One draw of ρ(T,V) from N points x_i and N independent points y_j.
pub fn mc_indicator_tri(p: &[Point; 3], v: &GradientSurrogate, n: usize, rng: &mut impl Rng) -> f64 {
    let n = n.max(1);
    let xs: Vec<[f64; 2]> = (0..n).map(|_| v.eval(sample_point(p, rng))).collect();
    let mut m = [0.0; 2];
    for _ in 0..n {
        let y = v.eval(sample_point(p, rng));
        m[0] += y[0];
        m[1] += y[1];
    }
    m = [m[0] / n as f64, m[1] / n as f64];
    let s: f64 = xs.iter().map(|x| (x[0] - m[0]).powi(2) + (x[1] - m[1]).powi(2)).sum();
    (area(p) / n as f64 * s).sqrt()
}

pub fn mc_indicator(mesh: &Mesh, eid: usize, v: &GradientSurrogate, n: usize, rng: &mut impl Rng) -> f64 {
    mc_indicator_tri(&mesh.coords(eid), v, n, rng)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Generator for one draw, keyed by (seed, generation, element, draw).
pub fn draw_rng(seed: u64, generation: u64, element: u64, draw: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(splitmix(splitmix(splitmix(generation) ^ element) ^ draw));
    rng
}

/// Triangles without the conformity requirement: the leaves of a bisection
/// forest over an initial mesh.
#[derive(Clone, Debug, PartialEq)]
pub struct NcMesh {
    pub leaves: Vec<([Point; 3], Lineage)>,
}

impl NcMesh {
    /// Leaves in the vertex order of `mesh`, whose edge (v1, v2) is the refinement edge.
    pub fn from_mesh(mesh: &Mesh) -> NcMesh {
        NcMesh { leaves: (0..mesh.n_elements()).map(|t| (mesh.coords(t), mesh.elements()[t].lineage)).collect() }
    }

    pub fn n_elements(&self) -> usize {
        self.leaves.len()
    }

    /// Newest-vertex bisection of a single leaf, no closure: the first child
    /// replaces it, the second is appended.
    pub fn bisect(&mut self, i: usize) {
        let ([a, b, c], lin) = self.leaves[i];
        let m = [0.5 * (b[0] + c[0]), 0.5 * (b[1] + c[1])];
        self.leaves[i] = ([m, a, b], lin.child(0));
        self.leaves.push(([m, c, a], lin.child(1)));
    }

    /// Whether every leaf of `self` lies inside a leaf of `coarse`.
    pub fn refines(&self, coarse: &NcMesh) -> bool {
        let set: HashSet<Lineage> = coarse.leaves.iter().map(|l| l.1).collect();
        self.leaves.iter().all(|(_, l)| ancestors(*l).any(|a| set.contains(&a)))
    }
}

/// `l` and its ancestors up to the root.
pub fn ancestors(l: Lineage) -> impl Iterator<Item = Lineage> {
    (0..=l.level).rev().map(move |lev| {
        let mask = if lev == 0 { 0 } else { u128::MAX >> (128 - lev) };
        Lineage { root: l.root, level: lev, path: l.path & mask }
    })
}

#[derive(PartialEq, PartialOrd)]
struct Key(f64, std::cmp::Reverse<usize>, u64);

impl Eq for Key {}

impl Ord for Key {
    fn cmp(&self, o: &Self) -> std::cmp::Ordering {
        self.partial_cmp(o).expect("finite indicators")
    }
}

/// Bisects a leaf of maximal η (earliest index among equals) until max η ≤ eps.
pub fn greedy_refine(mesh0: &Mesh, v: &GradientSurrogate, eps: f64) -> Result<NcMesh> {
    greedy_refine_nc(NcMesh::from_mesh(mesh0), v, eps)
}

pub fn greedy_refine_nc(mut nc: NcMesh, v: &GradientSurrogate, eps: f64) -> Result<NcMesh> {
    if !(eps > 0.0) {
        return Err(Error::Validation(format!("eps = {eps} must be positive")));
    }
    let mut version = vec![0u64; nc.n_elements()];
    let mut heap = BinaryHeap::new();
    let push = |heap: &mut BinaryHeap<Key>, nc: &NcMesh, i: usize, ver: u64| -> Result<()> {
        let e = eta_tri(&nc.leaves[i].0, v);
        if !e.is_finite() {
            return Err(Error::Numerical(format!("η not finite on leaf {i}")));
        }
        heap.push(Key(e, std::cmp::Reverse(i), ver));
        Ok(())
    };
    for i in 0..nc.n_elements() {
        push(&mut heap, &nc, i, 0)?;
    }
    let mut steps = 0;
    while let Some(Key(e, std::cmp::Reverse(i), ver)) = heap.pop() {
        if ver != version[i] {
            continue;
        }
        if e <= eps {
            break;
        }
        if steps == GREEDY_STEP_CAP {
            return Err(Error::Numerical(format!("greedy refinement exceeded {GREEDY_STEP_CAP} steps")));
        }
        steps += 1;
        nc.bisect(i);
        version[i] += 1;
        version.push(0);
        push(&mut heap, &nc, i, version[i])?;
        push(&mut heap, &nc, nc.n_elements() - 1, 0)?;
    }
    Ok(nc)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GreedyConfig {
    pub eps: f64,
    /// Draws per element and generation.
    pub k: usize,
    /// Monte-Carlo points per draw.
    pub n: usize,
    /// Confidence parameter; carried for reporting.
    pub m: usize,
    pub seed: u64,
}

impl GreedyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) {
            return Err(Error::Validation(format!("eps = {} must be positive", self.eps)));
        }
        if self.k == 0 || self.n == 0 || self.m == 0 {
            return Err(Error::Validation("K, N and m must be at least 1".into()));
        }
        Ok(())
    }
}

/// How an element's K draws are produced.
pub enum Sampler<'a> {
    MonteCarlo(&'a GradientSurrogate),
    /// ρ ≡ η, a deterministic stub.
    Exact(&'a GradientSurrogate),
    /// A network from [`adaptive_from_rho`] fed with K point pairs.
    Network { adaptive: &'a DeepRnn, v: &'a GradientSurrogate },
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StopState {
    pub stop_set: HashSet<Lineage>,
    /// Marks of the last generation that refined anything.
    pub marks: Vec<usize>,
}

impl StopState {
    pub fn covers(&self, l: Lineage) -> bool {
        ancestors(l).any(|a| self.stop_set.contains(&a))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerationRow {
    pub generation: usize,
    pub n_elements: usize,
    pub n_marked: usize,
    pub n_stopped: usize,
    /// Largest sampled indicator of the generation.
    pub max_eta: f64,
}

#[derive(Clone, Debug)]
pub struct StochasticOutcome {
    pub mesh: Mesh,
    pub state: StopState,
    pub trace: Vec<GenerationRow>,
}

/// Largest of the K draws on one element.
fn max_draw(s: &Sampler, p: &[Point; 3], cfg: &GreedyConfig, gen: u64, eid: u64) -> f64 {
    match s {
        Sampler::MonteCarlo(v) => (0..cfg.k)
            .map(|d| mc_indicator_tri(p, v, cfg.n, &mut draw_rng(cfg.seed, gen, eid, d as u64)))
            .fold(0.0, f64::max),
        Sampler::Exact(v) => eta_tri(p, v),
        Sampler::Network { adaptive, .. } => {
            let mut input = Vec::with_capacity(5 * cfg.k);
            let sa = area(p).sqrt();
            for d in 0..cfg.k {
                let mut rng = draw_rng(cfg.seed, gen, eid, d as u64);
                let (x, y) = (sample_point(p, &mut rng), sample_point(p, &mut rng));
                input.extend_from_slice(&[x[0], x[1], y[0], y[1], sa]);
            }
            // output is max(ρ) − eps clipped at 0; shift back for reporting
            adaptive.eval_flat(&input, 1)[0] + cfg.eps
        }
    }
}

/// Samples every element not inside the stop set K times; elements whose
/// draws all stay ≤ eps join the stop set, the others are refined with
/// closure, until nothing is marked.
pub fn stochastic_greedy_refine(mesh0: &Mesh, sampler: &Sampler, cfg: &GreedyConfig) -> Result<StochasticOutcome> {
    cfg.validate()?;
    if let Sampler::Network { adaptive, .. } = sampler {
        if adaptive.input_size() != 5 * cfg.k {
            return Err(Error::Dimension(format!("network takes {} inputs, K = {} needs {}", adaptive.input_size(), cfg.k, 5 * cfg.k)));
        }
    }
    let mut mesh = mesh0.clone();
    let mut state = StopState::default();
    let mut trace = Vec::new();
    for gen in 0..=STOCHASTIC_GENERATION_CAP {
        let lin: Vec<Lineage> = mesh.elements().iter().map(|e| e.lineage).collect();
        let open: Vec<usize> = (0..mesh.n_elements()).filter(|&t| !state.covers(lin[t])).collect();
        let draws: Vec<f64> =
            open.par_iter().map(|&t| max_draw(sampler, &mesh.coords(t), cfg, gen as u64, t as u64)).collect();
        let mut marks = Vec::new();
        let mut max_eta: f64 = 0.0;
        for (&t, &d) in open.iter().zip(&draws) {
            if !d.is_finite() {
                return Err(Error::Numerical(format!("indicator not finite on element {t}")));
            }
            max_eta = max_eta.max(d);
            if d <= cfg.eps {
                state.stop_set.insert(lin[t]);
            } else {
                marks.push(t);
            }
        }
        trace.push(GenerationRow {
            generation: gen,
            n_elements: mesh.n_elements(),
            n_marked: marks.len(),
            n_stopped: state.stop_set.len(),
            max_eta,
        });
        if marks.is_empty() {
            return Ok(StochasticOutcome { mesh, state, trace });
        }
        if gen == STOCHASTIC_GENERATION_CAP {
            break;
        }
        mesh = mesh.refine(&marks)?;
        state.marks = marks;
    }
    Err(Error::Numerical(format!("stochastic greedy exceeded {STOCHASTIC_GENERATION_CAP} generations")))
}

/// ρ_T = |T|^{1/2} ⊙ |v(x) − v(y)| from inputs (x₁, x₂, y₁, y₂, |T|^{1/2}),
/// with products of factors up to 2^{n−1}.
pub fn build_rho_net(v: &Dnn, n: usize) -> Result<Dnn> {
    if v.input_size() != 2 || v.output_size() != 2 {
        return Err(Error::Dimension(format!("v maps {} to {} values, expected 2 to 2", v.input_size(), v.output_size())));
    }
    if n == 0 {
        return Err(Error::Validation("n must be at least 1".into()));
    }
    let mut b = NetBuilder::new(vec![false, false, false, false, true]);
    let x = b.inputs();
    let s = x[4];
    b.release_all(&x[..4]);
    let outs = b.apply(&[(v, vec![x[0], x[1]]), (v, vec![x[2], x[3]])]);
    let (vx, vy) = (&outs[0], &outs[1]);
    let nodes: Vec<Node> = (0..2).map(|i| Node::signed(vec![b.t(vx[i], Scale::ONE), b.t(vy[i], Scale::NEG)])).collect();
    b.release_all(vx);
    b.release_all(vy);
    let d = b.layer(&nodes);
    materialize(&mut b, &d);
    let nodes: Vec<Node> = d.iter().map(|&c| Node::relu(vec![b.abs(c, Scale::ONE)])).collect();
    b.release_all(&d);
    let a = b.layer(&nodes);
    b.release_all(&a);
    b.release(s);
    let p = emit_products(&mut b, &[(a[0], s, n as i32), (a[1], s, n as i32)], n);
    Ok(b.finish_chans(&p))
}

/// max{max_k ρ_{T,k}, eps} − eps over the K sample tuples of one element,
/// each laid out as the input of `rho`.
pub fn adaptive_from_rho(rho: &Dnn, k: usize, eps: f64) -> Result<DeepRnn> {
    if rho.input_size() != 5 {
        return Err(Error::Dimension(format!("ρ network takes {} inputs, expected 5", rho.input_size())));
    }
    if k == 0 || !(eps > 0.0) {
        return Err(Error::Validation("K must be at least 1 and eps positive".into()));
    }
    let mut flags = vec![false; 5 * k];
    flags.push(true);
    let mut b = NetBuilder::new(flags);
    let x = b.inputs();
    b.release(x[5 * k]);
    b.release_all(&x[..5 * k]);
    let blocks: Vec<(&Dnn, Vec<_>)> = x[..5 * k].chunks(5).map(|c| (rho, c.to_vec())).collect();
    let outs = b.apply(&blocks);
    let mut terms: Vec<_> = outs.iter().flatten().map(|&c| b.t(c, Scale::ONE)).collect();
    terms.push(b.tcw("eps", eps, Scale::ONE));
    for o in &outs {
        b.release_all(o);
    }
    let m = emit_max(&mut b, &terms);
    let e = b.tcw("eps", eps, Scale::NEG);
    let y = b.layer(&[Node::relu(vec![b.t(m, Scale::ONE), e])]);
    b.release(m);
    let dnn = b.finish_chans(&y);
    Ok(DeepRnn::single(BasicRnn::new(dnn, 5 * k)?))
}
