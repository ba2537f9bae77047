//! Per-element residual estimator D⁴·mean(f²) + D²·Σ_j λ_j J_j as a network,
//! where D is the ∞-diameter, λ_j = |e_j|/|∂T| and J_j = |∇U_T − ∇U_{N_j}|².

use super::lanes::{emit_products, emit_ratios, emit_sqrts, emit_squares_of};
use super::{DeepRnn, FloatModel};
use crate::error::Result;
use crate::fem::{self, DiscreteSolution, Source};
use crate::mesh::Mesh;
use crate::rnn_core::{BasicRnn, Chan, NetBuilder, Node, Scale, Term};

/// Record layout: vertices P0..P2 (6), the vertex of each neighbour N_j
/// opposite the shared edge (6), monomial coefficients (c0, c1, c2) of U on T
/// and on N_0..N_2 (12), coefficients of f (3).
pub const RECORD_LEN: usize = 27;
const P: usize = 0;
const Q: usize = 6;
const UT: usize = 12;
const UN: usize = 15;
const F: usize = 24;

/// Binary magnitude windows the network is built for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Windows {
    /// |coordinates| and |coordinate differences| ≤ 2^coord.
    pub coord: i32,
    /// |gradient differences| ≤ 2^grad.
    pub grad: i32,
    /// |f1|, |f2| ≤ 2^fcoef.
    pub fcoef: i32,
    /// |f| at the vertices ≤ 2^fval.
    pub fval: i32,
}

impl Default for Windows {
    fn default() -> Windows {
        Windows { coord: 1, grad: 3, fcoef: 0, fval: 1 }
    }
}

fn exp_bound(v: f64) -> i32 {
    if v > 0.0 {
        v.log2().ceil() as i32
    } else {
        -1
    }
}

impl Windows {
    /// Smallest windows containing every record.
    pub fn fit(records: &[[f64; RECORD_LEN]]) -> Windows {
        let mut c: f64 = 0.0;
        let mut g: f64 = 0.0;
        let mut fc: f64 = 0.0;
        let mut fv: f64 = 0.0;
        for r in records {
            for k in 0..3 {
                let (x, y) = (r[P + 2 * k], r[P + 2 * k + 1]);
                c = c.max(2.0 * x.abs()).max(2.0 * y.abs());
                fv = fv.max((r[F] + r[F + 1] * x + r[F + 2] * y).abs());
            }
            for j in 0..3 {
                for d in 1..3 {
                    g = g.max((r[UT + d] - r[UN + 3 * j + d]).abs());
                }
            }
            fc = fc.max(r[F + 1].abs()).max(r[F + 2].abs());
        }
        Windows { coord: exp_bound(c).max(0), grad: exp_bound(g).max(0), fcoef: exp_bound(fc).max(0), fval: exp_bound(fv).max(0) }
    }
}

/// Builds the input records of every element.
pub fn encode_inputs(mesh: &Mesh, u: &DiscreteSolution, f: &Source) -> Result<Vec<[f64; RECORD_LEN]>> {
    let grads = fem::gradients(mesh, u)?;
    let nb = mesh.neighbors();
    let coef: Vec<[f64; 3]> = mesh
        .elements()
        .iter()
        .enumerate()
        .map(|(t, e)| {
            let p = mesh.vertices()[e.vertices[0]];
            let g = grads[t];
            [u.coefficients[e.vertices[0]] - g[0] * p[0] - g[1] * p[1], g[0], g[1]]
        })
        .collect();
    let mut out = Vec::with_capacity(mesh.n_elements());
    for (t, e) in mesh.elements().iter().enumerate() {
        let mut r = [0.0; RECORD_LEN];
        let p = mesh.coords(t);
        for k in 0..3 {
            r[P + 2 * k] = p[k][0];
            r[P + 2 * k + 1] = p[k][1];
        }
        r[UT..UT + 3].copy_from_slice(&coef[t]);
        for j in 0..3 {
            let (q, c) = match nb[t][j] {
                Some(o) => {
                    let ov = mesh.elements()[o].vertices;
                    let shared = [e.vertices[(j + 1) % 3], e.vertices[(j + 2) % 3]];
                    let far = ov.iter().copied().find(|v| !shared.contains(v)).expect("neighbour shares an edge");
                    (mesh.vertices()[far], coef[o])
                }
                None => (p[j], coef[t]),
            };
            r[Q + 2 * j] = q[0];
            r[Q + 2 * j + 1] = q[1];
            r[UN + 3 * j..UN + 3 * j + 3].copy_from_slice(&c);
        }
        r[F] = f.on(mesh, t);
        out.push(r);
    }
    Ok(out)
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Part {
    Vol,
    Jump,
    Full,
}

/// Output value in the network for one record.
fn emit(b: &mut NetBuilder, x: &[Chan], part: Part, n: usize, w: Windows, fm: FloatModel) -> Chan {
    let cfg = fm.if_cfg();
    let vol = part != Part::Jump;
    let jump = part != Part::Vol;
    // slots read at most by the first layer
    b.release_all(&x[Q..Q + 6]);
    b.release(x[UT]);
    for j in 0..3 {
        b.release(x[UN + 3 * j]);
    }
    let mut nodes = Vec::new();
    for j in 0..3 {
        let (s, e) = ((j + 1) % 3, (j + 2) % 3);
        for c in 0..2 {
            nodes.push(Node::signed(vec![b.t(x[P + 2 * e + c], Scale::ONE), b.t(x[P + 2 * s + c], Scale::NEG)]));
        }
    }
    if jump {
        for j in 0..3 {
            for d in 1..3 {
                nodes.push(Node::signed(vec![b.t(x[UT + d], Scale::ONE), b.t(x[UN + 3 * j + d], Scale::NEG)]));
            }
        }
    }
    b.release_all(&x[UT + 1..UT + 3]);
    for j in 0..3 {
        b.release_all(&x[UN + 3 * j + 1..UN + 3 * j + 3]);
    }
    if !vol {
        b.release_all(&x[P..P + 6]);
        b.release_all(&x[F..F + 3]);
    }
    let made = b.layer(&nodes);
    let diffs = made[..6].to_vec();
    let deltas = made[6..].to_vec();
    let abs: Vec<Term> = diffs.iter().map(|&c| b.abs(c, Scale::ONE)).collect();
    if !jump {
        b.release_all(&diffs);
    }
    let d = super::lanes::emit_max(b, &abs);

    // squares of coordinate differences, gradient jumps, D, and the f products
    let mut lanes: Vec<(Vec<Term>, i32)> = Vec::new();
    if jump {
        for &c in &diffs {
            lanes.push((vec![b.t(c, Scale::ONE)], w.coord));
        }
        for &c in &deltas {
            lanes.push((vec![b.t(c, Scale::ONE)], w.grad));
        }
    }
    if part != Part::Jump {
        lanes.push((vec![b.t(d, Scale::ONE)], w.coord));
    }
    let fw = w.fcoef.max(w.coord) + 1;
    if vol {
        for k in 0..3 {
            for c in 0..2 {
                let (fc, pc) = (x[F + 1 + c], x[P + 2 * k + c]);
                lanes.push((vec![b.t(fc, Scale::ONE), b.t(pc, Scale::ONE)], fw));
                lanes.push((vec![b.t(pc, Scale::ONE)], fw));
            }
        }
        lanes.push((vec![b.t(x[F + 1], Scale::ONE)], fw));
        lanes.push((vec![b.t(x[F + 2], Scale::ONE)], fw));
    }
    if jump {
        b.release_all(&diffs);
        b.release_all(&deltas);
    }
    if part != Part::Jump {
        b.release(d);
    }
    if vol {
        b.release_all(&x[P..P + 6]);
        b.release(x[F + 1]);
        b.release(x[F + 2]);
    }
    let sq = emit_squares_of(b, &lanes, n);
    let (sq_j, rest) = sq.split_at(if jump { 12 } else { 0 });
    let d2 = rest.first().copied();
    let (fprod, fsq) = if vol { (&rest[1..13], &rest[13..15]) } else { (&rest[..0], &rest[..0]) };

    // f at the vertices and D⁴
    let mut mf2 = None;
    let mut d4 = None;
    if vol || part == Part::Full {
        let mut lanes: Vec<(Vec<Term>, i32)> = Vec::new();
        let mut gsum = Vec::new();
        if vol {
            for k in 0..3 {
                let mut g = vec![b.t(x[F], Scale::ONE)];
                for c in 0..2 {
                    g.push(b.t(fprod[4 * k + 2 * c], Scale::HALF));
                    g.push(b.t(fprod[4 * k + 2 * c + 1], Scale::new(true, -1)));
                    g.push(b.t(fsq[c], Scale::new(true, -1)));
                }
                gsum.extend(g.iter().copied());
                lanes.push((g, w.fval));
            }
            lanes.push((gsum, w.fval + 2));
        }
        if part == Part::Full {
            lanes.push((vec![b.t(d2.unwrap(), Scale::ONE)], 2 * w.coord));
        }
        b.release(x[F]);
        b.release_all(fprod);
        b.release_all(fsq);
        let q = emit_squares_of(b, &lanes, n);
        if vol {
            let twelfth = b.param("est.twelfth", 1.0 / 12.0);
            let terms: Vec<Term> = q[..4].iter().map(|&c| Term { src: crate::rnn_core::Src::Chan(c), param: twelfth, scale: Scale::ONE }).collect();
            b.release_all(&q[..4]);
            mf2 = Some(b.layer(&[Node::relu(terms)])[0]);
        }
        if part == Part::Full {
            d4 = Some(*q.last().unwrap());
        }
    }

    // Σ λ_j J_j
    let mut area_term = None;
    if jump {
        let mut nodes = Vec::new();
        for j in 0..3 {
            nodes.push(Node::relu(vec![b.t(sq_j[2 * j], Scale::ONE), b.t(sq_j[2 * j + 1], Scale::ONE)]));
        }
        for j in 0..3 {
            nodes.push(Node::relu(vec![b.t(sq_j[6 + 2 * j], Scale::ONE), b.t(sq_j[7 + 2 * j], Scale::ONE)]));
        }
        b.release_all(sq_j);
        let lj = b.layer(&nodes);
        let (l2, jj) = lj.split_at(3);
        b.release_all(l2);
        let len = emit_sqrts(b, l2, w.coord + 1, n + w.coord.max(0) as usize + 4, cfg);
        let per = b.layer(&[Node::relu(len.iter().map(|&c| b.t(c, Scale::ONE)).collect())])[0];
        b.release(per);
        b.release_all(&len);
        let lam = emit_ratios(b, &len, per, n + 4, cfg);
        let pairs: Vec<(Chan, Chan, i32)> = lam.iter().zip(jj).map(|(&l, &j)| (l, j, 2 * w.grad + 2)).collect();
        b.release_all(&lam);
        b.release_all(jj);
        let pr = emit_products(b, &pairs, n);
        let a = b.layer(&[Node::relu(pr.iter().map(|&c| b.t(c, Scale::ONE)).collect())])[0];
        b.release_all(&pr);
        area_term = Some(a);
    }

    let mut pairs = Vec::new();
    let wa = 2 * w.grad + 1;
    let wm = 2 * (w.fval + 2);
    match part {
        Part::Vol => pairs.push((d2.unwrap(), mf2.unwrap(), (2 * w.coord).max(wm) + 1)),
        Part::Jump => pairs.push((d, area_term.unwrap(), w.coord.max(wa) + 1)),
        Part::Full => {
            pairs.push((d2.unwrap(), area_term.unwrap(), (2 * w.coord).max(wa) + 1));
            pairs.push((d4.unwrap(), mf2.unwrap(), (4 * w.coord).max(wm) + 1));
        }
    }
    for &(p, q, _) in &pairs {
        b.release(p);
        b.release(q);
    }
    let pr = emit_products(b, &pairs, n);
    b.release_all(&pr);
    b.layer(&[Node::relu(pr.iter().map(|&c| b.t(c, Scale::ONE)).collect())])[0]
}

fn build(part: Part, n: usize, w: Windows, fm: FloatModel) -> BasicRnn {
    let mut b = NetBuilder::new(vec![false; RECORD_LEN + 1]);
    let x = b.inputs();
    b.release(x[RECORD_LEN]);
    let out = emit(&mut b, &x[..RECORD_LEN], part, n, w, fm);
    BasicRnn::new(b.finish_chans(&[out]), RECORD_LEN).expect("estimator stage")
}

/// ρ̃_T² per element of the record sequence.
pub fn build_estimator(n: usize) -> BasicRnn {
    build_estimator_with(n, Windows::default(), FloatModel::default())
}

pub fn build_estimator_with(n: usize, w: Windows, fm: FloatModel) -> BasicRnn {
    build(Part::Full, n, w, fm)
}

/// D²·mean(f²) per element.
pub fn build_vol(n: usize, w: Windows) -> DeepRnn {
    DeepRnn::single(build(Part::Vol, n, w, FloatModel::default()))
}

/// D·Σ_j λ_j J_j per element.
pub fn build_jump(n: usize, w: Windows) -> DeepRnn {
    DeepRnn::single(build(Part::Jump, n, w, FloatModel::default()))
}
