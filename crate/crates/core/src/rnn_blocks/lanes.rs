//! Layer emitters shared by the blocks. Each works on many independent lanes
//! in lockstep. Emitters never release the caller's channels; inputs that are
//! needed after the first emitted layer are retained internally, so callers may
//! release an input right before the call when they no longer need it.

use crate::rnn_core::{Chan, NetBuilder, Node, Scale, Src, Term};

/// Number of doubling steps of an IF and whether to use the one-layer form.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IfCfg {
    pub steps: usize,
    pub one_layer: bool,
}

pub const MINUS_HALF: Scale = Scale::new(true, -1);

/// IF(a; g > 0) for one lane; `g` indexes the shared comparison list.
pub struct IfSpec {
    pub a: Vec<Term>,
    pub signed: bool,
    pub g: usize,
}

/// Channels of an emitted IF. With A = max(a,0) (and the negative part for
/// signed a), R equals A when g ≤ 0 and 0 when g is clearly positive.
#[derive(Clone, Copy, Debug)]
pub struct IfOut {
    pub a: Chan,
    pub r: Chan,
    pub r_neg: Option<Chan>,
}

impl IfOut {
    /// Terms of IF(a; g > 0), scaled by `s`.
    pub fn strict(&self, b: &NetBuilder, s: Scale) -> Vec<Term> {
        let mut v = vec![b.t(self.a, s), b.t(self.r, s.neg())];
        if let Some(m) = self.r_neg {
            v.push(b.t(m, s));
        }
        v
    }

    /// Terms of IF(a; g ≤ 0), scaled by `s`.
    pub fn complement(&self, b: &NetBuilder, s: Scale) -> Vec<Term> {
        let mut v = vec![b.t(self.r, s)];
        if let Some(m) = self.r_neg {
            v.push(b.t(m, s.neg()));
        }
        v
    }

    pub fn release(&self, b: &mut NetBuilder) {
        b.release(self.a);
        b.release(self.r);
        if let Some(m) = self.r_neg {
            b.release(m);
        }
    }
}

/// Emits `specs.len()` IFs sharing the comparisons `gs` in `cfg.steps + 1`
/// layers (two for the one-layer form).
pub fn emit_ifs(b: &mut NetBuilder, gs: &[Vec<Term>], specs: &[IfSpec], cfg: IfCfg) -> Vec<IfOut> {
    let mut nodes: Vec<Node> = specs
        .iter()
        .map(|s| if s.signed { Node::signed(s.a.clone()) } else { Node::relu(s.a.clone()) })
        .collect();
    nodes.extend(gs.iter().map(|g| Node::relu(g.clone())));
    let made = b.layer(&nodes);
    let (aa, gg) = made.split_at(specs.len());
    let gain = if cfg.one_layer {
        Some(b.param("if.gain", (cfg.steps as f64).exp2()))
    } else {
        None
    };
    let gterm = |b: &NetBuilder, g: Chan| match gain {
        Some(p) => Term { src: Src::Chan(g), param: p, scale: Scale::NEG },
        None => b.t(g, Scale::new(true, 1)),
    };
    let mut nodes = Vec::new();
    for (s, &a) in specs.iter().zip(aa) {
        nodes.push(Node::relu(vec![b.pos(a, Scale::ONE), gterm(b, gg[s.g])]));
        if s.signed {
            nodes.push(Node::relu(vec![b.neg(a, Scale::ONE), gterm(b, gg[s.g])]));
        }
    }
    b.release_all(gg);
    let mut rs = b.layer(&nodes);
    if !cfg.one_layer {
        for _ in 1..cfg.steps {
            let mut nodes = Vec::with_capacity(rs.len());
            let mut k = 0;
            for (s, &a) in specs.iter().zip(aa) {
                nodes.push(Node::relu(vec![b.t(rs[k], Scale::TWO), b.pos(a, Scale::NEG)]));
                k += 1;
                if s.signed {
                    nodes.push(Node::relu(vec![b.t(rs[k], Scale::TWO), b.neg(a, Scale::NEG)]));
                    k += 1;
                }
            }
            b.release_all(&rs);
            rs = b.layer(&nodes);
        }
    }
    let mut out = Vec::with_capacity(specs.len());
    let mut k = 0;
    for (s, &a) in specs.iter().zip(aa) {
        let r = rs[k];
        k += 1;
        let r_neg = if s.signed {
            k += 1;
            Some(rs[k - 1])
        } else {
            None
        };
        out.push(IfOut { a, r, r_neg });
    }
    out
}

/// Turns raw signed inputs into carried channels so their sign parts can be read.
pub fn materialize(b: &mut NetBuilder, cs: &[Chan]) {
    if cs.iter().any(|&c| b.is_raw(c) && !b.nonneg(c)) {
        b.layer(&[]);
    }
}

fn scale_param(b: &mut NetBuilder, name: &str, exp2: i32) -> u32 {
    if exp2 == 0 {
        b.unit()
    } else {
        b.param(&format!("{name}.{exp2}"), (exp2 as f64).exp2())
    }
}

/// Input scaling of the square network for window 2^s.
pub(crate) fn square_in(b: &mut NetBuilder, s: i32) -> u32 {
    scale_param(b, "sq.in", -s)
}

/// Output scaling 4^s of the square network.
pub(crate) fn square_out(b: &mut NetBuilder, s: i32) -> u32 {
    scale_param(b, "sq.out", 2 * s)
}

/// One sawtooth step: from w emits u = G(w) and v = G(u) with
/// G(t) = 2 max(t,0) − 4 max(t − 1/2, 0) in four layers. When `pending`
/// holds the previous (y, u, v), the Horner update y ← 16y + 4u + v is
/// emitted in the first layer. Consumes `w` and `pending`.
pub(crate) fn sawtooth_step(b: &mut NetBuilder, lanes: &mut [SawLane]) {
    let sixteen = b.param("sq.sixteen", 16.0);
    let mut nodes = Vec::new();
    for l in lanes.iter() {
        nodes.push(Node::relu(vec![b.t(l.w, Scale::ONE), b.tc(MINUS_HALF)]));
        if let Some((u, v)) = l.pending {
            nodes.push(horner(b, l.y, u, v, sixteen));
        }
    }
    for l in lanes.iter() {
        if let Some((u, _)) = l.pending {
            b.release(u);
            if let Some(y) = l.y {
                b.release(y);
            }
        }
    }
    let made = b.layer(&nodes);
    let mut k = 0;
    let mut r2 = Vec::with_capacity(lanes.len());
    for l in lanes.iter_mut() {
        r2.push(made[k]);
        k += 1;
        if l.pending.take().is_some() {
            l.y = Some(made[k]);
            k += 1;
        }
    }
    let nodes: Vec<Node> = lanes
        .iter()
        .zip(&r2)
        .map(|(l, &r)| Node::relu(vec![b.t(l.w, Scale::TWO), b.t(r, Scale::new(true, 2))]))
        .collect();
    for (l, &r) in lanes.iter().zip(&r2) {
        b.release(l.w);
        b.release(r);
    }
    let us = b.layer(&nodes);
    let nodes: Vec<Node> = us.iter().map(|&u| Node::relu(vec![b.t(u, Scale::ONE), b.tc(MINUS_HALF)])).collect();
    let r2 = b.layer(&nodes);
    let nodes: Vec<Node> =
        us.iter().zip(&r2).map(|(&u, &r)| Node::relu(vec![b.t(u, Scale::TWO), b.t(r, Scale::new(true, 2))])).collect();
    b.release_all(&r2);
    let vs = b.layer(&nodes);
    for ((l, &u), &v) in lanes.iter_mut().zip(&us).zip(&vs) {
        l.pending = Some((u, v));
        l.w = v;
    }
}

pub(crate) fn horner(b: &NetBuilder, y: Option<Chan>, u: Chan, v: Chan, sixteen: u32) -> Node {
    let mut t = Vec::with_capacity(3);
    if let Some(y) = y {
        t.push(Term { src: Src::Chan(y), param: sixteen, scale: Scale::ONE });
    }
    t.push(b.t(u, Scale::FOUR));
    t.push(b.t(v, Scale::ONE));
    Node::relu(t)
}

pub(crate) struct SawLane {
    pub w: Chan,
    pub y: Option<Chan>,
    pub pending: Option<(Chan, Chan)>,
}

/// Approximates x² for each lane (x, s) with |x| ≤ 2^s by the linear spline
/// of t² at 4^n points, t = |x|/2^s. Returns nonnegative channels.
pub fn emit_squares(b: &mut NetBuilder, xs: &[(Chan, i32)], n: usize) -> Vec<Chan> {
    assert!(n >= 1);
    let chans: Vec<Chan> = xs.iter().map(|x| x.0).collect();
    for &c in &chans {
        b.retain(c);
    }
    materialize(b, &chans);
    b.release_all(&chans);
    let nodes: Vec<Node> = xs
        .iter()
        .map(|&(x, s)| {
            let p = square_in(b, s);
            Node::relu(vec![Term { src: Src::Abs(x), param: p, scale: Scale::ONE }])
        })
        .collect();
    let ts = b.layer(&nodes);
    let mut lanes: Vec<SawLane> = ts
        .iter()
        .map(|&t| {
            b.retain(t);
            SawLane { w: t, y: None, pending: None }
        })
        .collect();
    for _ in 0..n {
        sawtooth_step(b, &mut lanes);
    }
    let sixteen = b.param("sq.sixteen", 16.0);
    let nodes: Vec<Node> = lanes
        .iter()
        .map(|l| {
            let (u, v) = l.pending.unwrap();
            horner(b, l.y, u, v, sixteen)
        })
        .collect();
    for l in &lanes {
        let (u, v) = l.pending.unwrap();
        b.release(u);
        b.release(v);
        if let Some(y) = l.y {
            b.release(y);
        }
    }
    let mut ys = b.layer(&nodes);
    let sixteenth = b.param("sq.sixteenth", 1.0 / 16.0);
    for _ in 0..n {
        let nodes: Vec<Node> =
            ys.iter().map(|&y| Node::relu(vec![Term { src: Src::Chan(y), param: sixteenth, scale: Scale::ONE }])).collect();
        b.release_all(&ys);
        ys = b.layer(&nodes);
    }
    let nodes: Vec<Node> = xs
        .iter()
        .zip(ts.iter().zip(&ys))
        .map(|(&(_, s), (&t, &y))| {
            let p = square_out(b, s);
            Node::relu(vec![
                Term { src: Src::Chan(t), param: p, scale: Scale::ONE },
                Term { src: Src::Chan(y), param: p, scale: Scale::NEG },
            ])
        })
        .collect();
    b.release_all(&ts);
    b.release_all(&ys);
    b.layer(&nodes)
}

/// Squares of linear combinations: one layer forming each combination, then
/// [`emit_squares`].
pub fn emit_squares_of(b: &mut NetBuilder, lanes: &[(Vec<Term>, i32)], n: usize) -> Vec<Chan> {
    let nodes: Vec<Node> = lanes.iter().map(|(t, _)| Node::signed(t.clone())).collect();
    let vs = b.layer(&nodes);
    let xs: Vec<(Chan, i32)> = vs.iter().zip(lanes).map(|(&v, l)| (v, l.1)).collect();
    b.release_all(&vs);
    emit_squares(b, &xs, n)
}

/// x·y ≈ (SQ(x+y) − SQ(x) − SQ(y))/2 for each lane (x, y, s) with |x+y| ≤ 2^s.
pub fn emit_products(b: &mut NetBuilder, pairs: &[(Chan, Chan, i32)], n: usize) -> Vec<Chan> {
    let mut lanes = Vec::with_capacity(3 * pairs.len());
    for &(x, y, s) in pairs {
        lanes.push((vec![b.t(x, Scale::ONE), b.t(y, Scale::ONE)], s));
        lanes.push((vec![b.t(x, Scale::ONE)], s));
        lanes.push((vec![b.t(y, Scale::ONE)], s));
    }
    let q = emit_squares_of(b, &lanes, n);
    let nodes: Vec<Node> = q
        .chunks(3)
        .map(|c| Node::signed(vec![b.t(c[0], Scale::HALF), b.t(c[1], Scale::new(true, -1)), b.t(c[2], Scale::new(true, -1))]))
        .collect();
    b.release_all(&q);
    b.layer(&nodes)
}

/// max of nonnegative terms, as a pairwise tree of a + max(b − a, 0).
pub fn emit_max(b: &mut NetBuilder, vals: &[Term]) -> Chan {
    assert!(!vals.is_empty());
    let nodes: Vec<Node> = vals.iter().map(|&t| Node::relu(vec![t])).collect();
    let mut cur = b.layer(&nodes);
    while cur.len() > 1 {
        let nodes: Vec<Node> = cur
            .chunks(2)
            .filter(|p| p.len() == 2)
            .map(|p| Node::relu(vec![b.t(p[1], Scale::ONE), b.t(p[0], Scale::NEG)]))
            .collect();
        let ks = b.layer(&nodes);
        let nodes: Vec<Node> = cur
            .chunks(2)
            .enumerate()
            .map(|(i, p)| {
                if p.len() == 2 {
                    Node::relu(vec![b.t(p[0], Scale::ONE), b.t(ks[i], Scale::ONE)])
                } else {
                    Node::relu(vec![b.t(p[0], Scale::ONE)])
                }
            })
            .collect();
        b.release_all(&cur);
        b.release_all(&ks);
        cur = b.layer(&nodes);
    }
    cur[0]
}

/// Largest s on the grid of step 2^{top}/2^{iters} with s² ≤ q, by bisection.
pub fn emit_sqrts(b: &mut NetBuilder, qs: &[Chan], top: i32, iters: usize, cfg: IfCfg) -> Vec<Chan> {
    for &q in qs {
        b.retain(q);
    }
    let h0 = ((top - 1) as f64).exp2();
    let init = [b.tcw("sqrt.h", h0, Scale::ONE), b.tcw("sqrt.h2", h0 * h0, Scale::ONE)];
    let hh = b.layer(&[Node::relu(vec![init[0]]), Node::relu(vec![init[1]])]);
    let (mut h, mut h2) = (hh[0], hh[1]);
    let mut st: Vec<[Chan; 3]> = qs.iter().map(|_| [b.zero(), b.zero(), b.zero()]).collect();
    for _ in 0..iters {
        let mut gs = Vec::new();
        let mut specs = Vec::new();
        for (j, (&q, s)) in qs.iter().zip(&st).enumerate() {
            // (s + h)² − q = s² + 2sh + h² − q
            gs.push(vec![b.t(s[1], Scale::ONE), b.t(s[2], Scale::TWO), b.t(h2, Scale::ONE), b.t(q, Scale::NEG)]);
            specs.push(IfSpec { a: vec![b.t(h, Scale::ONE)], signed: false, g: j });
            specs.push(IfSpec { a: vec![b.t(s[2], Scale::TWO), b.t(h2, Scale::ONE)], signed: false, g: j });
            specs.push(IfSpec { a: vec![b.t(h2, Scale::HALF)], signed: false, g: j });
        }
        let ifs = emit_ifs(b, &gs, &specs, cfg);
        let mut nodes = vec![Node::relu(vec![b.t(h, Scale::HALF)]), Node::relu(vec![b.t(h2, Scale::QUARTER)])];
        for (s, r) in st.iter().zip(ifs.chunks(3)) {
            nodes.push(Node::relu(vec![b.t(s[0], Scale::ONE), b.t(r[0].r, Scale::ONE)]));
            nodes.push(Node::relu(vec![b.t(s[1], Scale::ONE), b.t(r[1].r, Scale::ONE)]));
            nodes.push(Node::relu(vec![b.t(s[2], Scale::HALF), b.t(r[2].r, Scale::ONE)]));
        }
        for o in &ifs {
            o.release(b);
        }
        for s in &st {
            b.release_all(s);
        }
        b.release(h);
        b.release(h2);
        let made = b.layer(&nodes);
        h = made[0];
        h2 = made[1];
        for (j, s) in st.iter_mut().enumerate() {
            *s = [made[2 + 3 * j], made[3 + 3 * j], made[4 + 3 * j]];
        }
    }
    b.release(h);
    b.release(h2);
    b.release_all(qs);
    st.into_iter()
        .map(|s| {
            b.release(s[1]);
            b.release(s[2]);
            s[0]
        })
        .collect()
}

/// λ_j ∈ [0,1) with λ_j·den ≤ num_j, by bisection.
pub fn emit_ratios(b: &mut NetBuilder, nums: &[Chan], den: Chan, iters: usize, cfg: IfCfg) -> Vec<Chan> {
    for &q in nums {
        b.retain(q);
    }
    b.retain(den);
    let init = [b.tc(Scale::HALF), b.t(den, Scale::HALF)];
    let hh = b.layer(&[Node::relu(vec![init[0]]), Node::relu(vec![init[1]])]);
    let (mut h, mut hd) = (hh[0], hh[1]);
    let mut st: Vec<[Chan; 2]> = nums.iter().map(|_| [b.zero(), b.zero()]).collect();
    for _ in 0..iters {
        let mut gs = Vec::new();
        let mut specs = Vec::new();
        for (j, (&q, s)) in nums.iter().zip(&st).enumerate() {
            gs.push(vec![b.t(s[1], Scale::ONE), b.t(hd, Scale::ONE), b.t(q, Scale::NEG)]);
            specs.push(IfSpec { a: vec![b.t(h, Scale::ONE)], signed: false, g: j });
            specs.push(IfSpec { a: vec![b.t(hd, Scale::ONE)], signed: false, g: j });
        }
        let ifs = emit_ifs(b, &gs, &specs, cfg);
        let mut nodes = vec![Node::relu(vec![b.t(h, Scale::HALF)]), Node::relu(vec![b.t(hd, Scale::HALF)])];
        for (s, r) in st.iter().zip(ifs.chunks(2)) {
            nodes.push(Node::relu(vec![b.t(s[0], Scale::ONE), b.t(r[0].r, Scale::ONE)]));
            nodes.push(Node::relu(vec![b.t(s[1], Scale::ONE), b.t(r[1].r, Scale::ONE)]));
        }
        for o in &ifs {
            o.release(b);
        }
        for s in &st {
            b.release_all(s);
        }
        b.release(h);
        b.release(hd);
        let made = b.layer(&nodes);
        h = made[0];
        hd = made[1];
        for (j, s) in st.iter_mut().enumerate() {
            *s = [made[2 + 2 * j], made[3 + 2 * j]];
        }
    }
    b.release(h);
    b.release(hd);
    b.release_all(nums);
    b.release(den);
    st.into_iter()
        .map(|s| {
            b.release(s[1]);
            s[0]
        })
        .collect()
}
