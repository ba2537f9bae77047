//! Marking as a stack of recurrent stages: running max and sum, a bisection
//! search for the Dörfler cutoff, rounding to a band around it, and selection
//! of the earliest entries among the rounded ties.
//!
//! The float operations match [`crate::marking::mark_replay`] one for one.

use super::estimator::{build_estimator_with, Windows};
use super::lanes::{emit_ifs, IfCfg, IfOut, IfSpec};
use super::{AdaptiveParams, FloatModel};
use crate::error::{Error, Result};
use crate::rnn_core::{BasicRnn, Chan, DeepRnn, NetBuilder, Node, Scale, Term, Wiring};

/// Positions in the last output of MARK and ADAPTIVE.
pub struct MarkOutputs;

impl MarkOutputs {
    /// Positive exactly on marked entries.
    pub const MARK: usize = 0;
    /// The perturbed sequence x̃.
    pub const PERTURBED: usize = 1;
}

fn stage(n_in: usize, flags: Vec<bool>, body: impl FnOnce(&mut NetBuilder, &[Chan]) -> Vec<Vec<Term>>) -> BasicRnn {
    let mut b = NetBuilder::new(flags);
    let x = b.inputs();
    let outs = body(&mut b, &x);
    BasicRnn::new(b.finish(&outs), n_in).expect("mark stage")
}

fn one(b: &NetBuilder, c: Chan) -> Vec<Term> {
    vec![b.t(c, Scale::ONE)]
}

fn if1(b: &mut NetBuilder, a: Chan, g: Vec<Term>, cfg: IfCfg) -> IfOut {
    let a = vec![b.t(a, Scale::ONE)];
    emit_ifs(b, &[g], &[IfSpec { a, signed: false, g: 0 }], cfg).remove(0)
}

/// (x) → (x, running max, running sum).
fn stage_max_sum() -> BasicRnn {
    stage(1, vec![true; 4], |b, x| {
        let (v, m, s) = (x[0], x[2], x[3]);
        b.release(x[1]);
        let k = b.layer(&[Node::relu(vec![b.t(v, Scale::ONE), b.t(m, Scale::NEG)])])[0];
        vec![one(b, v), vec![b.t(m, Scale::ONE), b.t(k, Scale::ONE)], vec![b.t(s, Scale::ONE), b.t(v, Scale::ONE)]]
    })
}

/// Broadcast of (max, sum): (x, y = max/2, z = max/4, S, 0).
fn stage_init() -> BasicRnn {
    stage(6, vec![true; 11], |b, x| {
        let (v, bm, bs) = (x[0], x[4], x[5]);
        let st = &x[6..];
        vec![
            one(b, v),
            vec![b.t(st[1], Scale::ONE), b.t(bm, Scale::HALF)],
            vec![b.t(st[2], Scale::ONE), b.t(bm, Scale::QUARTER)],
            vec![b.t(st[3], Scale::ONE), b.t(bs, Scale::ONE)],
            vec![],
        ]
    })
}

/// σ_i = σ_{i−1} + IF(x_i; x_i ≥ y).
fn stage_sums(cfg: IfCfg) -> BasicRnn {
    stage(5, vec![true; 10], |b, x| {
        let (v, y, z, s) = (x[0], x[1], x[2], x[3]);
        let sig = x[9];
        b.release(x[4]);
        b.release_all(&x[5..9]);
        let o = if1(b, v, vec![b.t(y, Scale::ONE), b.t(v, Scale::NEG)], cfg);
        let mut sn = one(b, sig);
        sn.extend(o.complement(b, Scale::ONE));
        vec![one(b, v), one(b, y), one(b, z), one(b, s), sn]
    })
}

/// y ← y + IF(z; σ ≥ θS) − IF(z; σ < θS), z ← z/2, with σ, S broadcast.
fn stage_pivot(theta: f64, cfg: IfCfg) -> BasicRnn {
    stage(10, vec![true; 15], |b, x| {
        let (v, y, z, s) = (x[0], x[1], x[2], x[3]);
        let bsig = x[9];
        let sig = x[14];
        b.release(x[4]);
        b.release_all(&x[5..9]);
        b.release_all(&x[10..14]);
        b.release(bsig);
        b.release(sig);
        let sn = b.layer(&[Node::relu(vec![b.t(sig, Scale::ONE), b.t(bsig, Scale::ONE)])])[0];
        let th = b.tw(s, "theta", theta);
        let o = if1(b, z, vec![th, b.t(sn, Scale::NEG)], cfg);
        let r = o.r;
        let vv = b.layer(&[Node::relu(vec![b.t(z, Scale::ONE), b.t(r, Scale::NEG)])])[0];
        vec![
            one(b, v),
            vec![b.t(y, Scale::ONE), b.t(r, Scale::ONE), b.t(vv, Scale::NEG)],
            vec![b.t(z, Scale::HALF)],
            one(b, s),
            one(b, sn),
        ]
    })
}

/// x̃ = max(x, W) with W = upper when x lies in [lower, upper], else 0.
/// Consumes `upper` only through the returned term of W; `x`, `lower` are read.
fn emit_round(b: &mut NetBuilder, v: Chan, upper: Chan, lower: Chan, cfg: IfCfg) -> Vec<Term> {
    b.retain(v);
    let sums = b.layer(&[
        Node::relu(vec![b.t(v, Scale::ONE), b.t(upper, Scale::ONE)]),
        Node::signed(vec![b.t(lower, Scale::ONE), b.t(upper, Scale::ONE)]),
    ]);
    b.release_all(&sums);
    let specs = [
        IfSpec { a: vec![b.t(upper, Scale::ONE)], signed: false, g: 0 },
        IfSpec { a: vec![b.t(upper, Scale::ONE)], signed: false, g: 1 },
    ];
    let gs = [
        vec![b.t(v, Scale::ONE), b.t(upper, Scale::NEG)],
        vec![b.t(sums[1], Scale::ONE), b.t(sums[0], Scale::NEG)],
    ];
    let ifs = emit_ifs(b, &gs, &specs, cfg);
    let mut t = vec![b.t(upper, Scale::ONE)];
    for o in &ifs {
        t.extend(o.strict(b, Scale::NEG));
    }
    for o in &ifs {
        o.release(b);
    }
    let w = b.layer(&[Node::relu(t)])[0];
    let k = b.layer(&[Node::relu(vec![b.t(v, Scale::ONE), b.t(w, Scale::NEG)])])[0];
    b.release(v);
    b.release(w);
    b.release(k);
    vec![b.t(w, Scale::ONE), b.t(k, Scale::ONE)]
}

/// (x, y, z, S, σ) → (x̃, upper, S) for the band [y − 2z, y + 2z].
fn stage_round_band(cfg: IfCfg) -> BasicRnn {
    stage(5, vec![true; 8], |b, x| {
        let (v, y, z, s) = (x[0], x[1], x[2], x[3]);
        b.release(x[4]);
        b.release_all(&x[5..8]);
        b.release(y);
        b.release(z);
        let e = b.layer(&[
            Node::relu(vec![b.t(y, Scale::ONE), b.t(z, Scale::TWO)]),
            Node::signed(vec![b.t(y, Scale::ONE), b.t(z, Scale::new(true, 1))]),
        ]);
        let (up, lo) = (e[0], e[1]);
        b.release(v);
        b.release(lo);
        let xt = emit_round(b, v, up, lo, cfg);
        vec![xt, one(b, up), one(b, s)]
    })
}

/// (x̃, upper, S) → (ỹ, x̂, S̃, T, Spre, upper, S, x̃) with ỹ = max(x̃ − upper, 0),
/// x̂ = upper on ties, S̃ = Σ_{x̃ > upper} x̃, T = Σ x̃, Spre = Σ_{j<i} x̂_j.
fn stage_ties(cfg: IfCfg) -> BasicRnn {
    stage(3, vec![true; 11], |b, x| {
        let (v, up, s) = (x[0], x[1], x[2]);
        let st = &x[3..];
        let (xh, above, total, pre) = (st[1], st[2], st[3], st[4]);
        b.release(st[0]);
        b.release_all(&st[5..8]);
        let gs = [vec![b.t(v, Scale::ONE), b.t(up, Scale::NEG)], vec![b.t(up, Scale::ONE), b.t(v, Scale::NEG)]];
        let specs = [
            IfSpec { a: vec![b.t(up, Scale::ONE)], signed: false, g: 1 },
            IfSpec { a: vec![b.t(up, Scale::ONE)], signed: false, g: 0 },
            IfSpec { a: vec![b.t(v, Scale::ONE)], signed: false, g: 0 },
        ];
        let ifs = emit_ifs(b, &gs, &specs, cfg);
        let mut tie = vec![b.t(up, Scale::ONE)];
        tie.extend(ifs[0].strict(b, Scale::NEG));
        tie.extend(ifs[1].strict(b, Scale::NEG));
        let nodes =
            [Node::relu(tie), Node::relu(ifs[2].strict(b, Scale::ONE)), Node::relu(vec![b.t(v, Scale::ONE), b.t(up, Scale::NEG)])];
        for o in &ifs {
            o.release(b);
        }
        let m = b.layer(&nodes);
        vec![
            one(b, m[2]),
            one(b, m[0]),
            vec![b.t(above, Scale::ONE), b.t(m[1], Scale::ONE)],
            vec![b.t(total, Scale::ONE), b.t(v, Scale::ONE)],
            vec![b.t(pre, Scale::ONE), b.t(xh, Scale::ONE)],
            one(b, up),
            one(b, s),
            one(b, v),
        ]
    })
}

/// Selects ties while S̃ + Spre < θT; optionally caps by S − stop.
fn stage_select(theta: f64, stop: Option<f64>, cfg: IfCfg) -> BasicRnn {
    stage(16, vec![true; 20], |b, x| {
        let (ex, xh, pre, up, s, xt) = (x[0], x[1], x[4], x[5], x[6], x[7]);
        let (babove, btotal) = (x[8 + 2], x[8 + 3]);
        let st = &x[16..];
        b.release(x[2]);
        b.release(x[3]);
        b.release_all(&x[8..10]);
        b.release_all(&x[12..16]);
        b.release(st[0]);
        b.release(st[1]);
        b.release_all(&[babove, btotal, st[2], st[3]]);
        let lat = b.layer(&[
            Node::relu(vec![b.t(st[2], Scale::ONE), b.t(babove, Scale::ONE)]),
            Node::relu(vec![b.t(st[3], Scale::ONE), b.t(btotal, Scale::ONE)]),
        ]);
        let (an, tn) = (lat[0], lat[1]);
        b.release(pre);
        let w = b.layer(&[Node::relu(vec![b.t(an, Scale::ONE), b.t(pre, Scale::ONE)])])[0];
        b.release(w);
        let th = b.tw(tn, "theta", theta);
        b.release(up);
        let o = if1(b, up, vec![th, b.t(w, Scale::NEG)], cfg);
        let zt = o.strict(b, Scale::ONE);
        o.release(b);
        let z = b.layer(&[Node::relu(zt)])[0];
        b.release(z);
        let k = b.layer(&[Node::relu(vec![b.t(xh, Scale::ONE), b.t(z, Scale::NEG)])])[0];
        b.release(xh);
        b.release(k);
        let m = b.layer(&[Node::relu(vec![b.t(xh, Scale::ONE), b.t(k, Scale::NEG)])])[0];
        b.release(ex);
        let k2 = b.layer(&[Node::relu(vec![b.t(ex, Scale::ONE), b.t(m, Scale::NEG)])])[0];
        let y = match stop {
            None => vec![b.t(m, Scale::ONE), b.t(k2, Scale::ONE)],
            Some(v) => {
                b.release(m);
                b.release(k2);
                b.release(s);
                let stop = b.tcw("eps_tol2", v, Scale::NEG);
                let yb = b.layer(&[
                    Node::relu(vec![b.t(m, Scale::ONE), b.t(k2, Scale::ONE)]),
                    Node::signed(vec![b.t(s, Scale::ONE), stop]),
                ]);
                let k3 = b.layer(&[Node::relu(vec![b.t(yb[0], Scale::ONE), b.t(yb[1], Scale::NEG)])])[0];
                vec![b.t(yb[0], Scale::ONE), b.t(k3, Scale::NEG)]
            }
        };
        vec![y, one(b, xt), one(b, an), one(b, tn)]
    })
}

fn check_theta(theta: f64) -> Result<()> {
    if !(theta > 0.0 && theta <= 1.0) {
        return Err(Error::Validation(format!("theta = {theta} must lie in (0,1]")));
    }
    Ok(())
}

fn search_stages(theta: f64, k: usize, cfg: IfCfg) -> (Vec<BasicRnn>, Vec<Wiring>) {
    let mut st = vec![stage_max_sum(), stage_init()];
    let mut wi = vec![Wiring::Plain, Wiring::InitWithLast];
    let (u, p) = (stage_sums(cfg), stage_pivot(theta, cfg));
    for _ in 1..k {
        st.push(u.clone());
        wi.push(Wiring::Plain);
        st.push(p.clone());
        wi.push(Wiring::InitWithLast);
    }
    (st, wi)
}

/// z_i = z_{i−1} + IF(x_i; x_i ≥ y) on the sequence of (x_i, y).
pub fn build_sumy() -> BasicRnn {
    let cfg = FloatModel::default().if_cfg();
    stage(2, vec![true; 3], |b, x| {
        let (v, y, z) = (x[0], x[1], x[2]);
        b.release(v);
        b.release(y);
        let o = if1(b, v, vec![b.t(y, Scale::ONE), b.t(v, Scale::NEG)], cfg);
        let mut t = one(b, z);
        t.extend(o.complement(b, Scale::ONE));
        vec![t]
    })
}

/// Pivot search: the last output holds (x_n, y_k, z_k, S, ·).
pub fn build_binary(theta: f64, k: usize) -> Result<DeepRnn> {
    check_theta(theta)?;
    if k == 0 {
        return Err(Error::Validation("k must be at least 1".into()));
    }
    let (st, wi) = search_stages(theta, k, FloatModel::default().if_cfg());
    DeepRnn::new(st, wi)
}

/// Band rounding on the sequence of (x_i, upper, lower).
pub fn build_round() -> BasicRnn {
    let cfg = FloatModel::default().if_cfg();
    stage(3, vec![true, true, false, true], |b, x| {
        let (v, up, lo) = (x[0], x[1], x[2]);
        b.release(x[3]);
        super::lanes::materialize(b, &[lo]);
        b.release(v);
        b.release(up);
        b.release(lo);
        b.retain(up);
        let t = emit_round(b, v, up, lo, cfg);
        b.release(up);
        vec![t]
    })
}

fn mark_stages(theta: f64, k: usize, stop: Option<f64>, cfg: IfCfg) -> (Vec<BasicRnn>, Vec<Wiring>) {
    let (mut st, mut wi) = search_stages(theta, k, cfg);
    st.push(stage_round_band(cfg));
    wi.push(Wiring::Plain);
    st.push(stage_ties(cfg));
    wi.push(Wiring::Plain);
    st.push(stage_select(theta, stop, cfg));
    wi.push(Wiring::InitWithLast);
    (st, wi)
}

/// MARK: entry i of output [`MarkOutputs::MARK`] is positive exactly when i is
/// marked; [`MarkOutputs::PERTURBED`] carries x̃.
pub fn build_mark(theta: f64, eps: f64, k: usize) -> Result<DeepRnn> {
    check_theta(theta)?;
    if !(eps > 0.0) || k == 0 {
        return Err(Error::Validation("eps must be positive and k at least 1".into()));
    }
    build_mark_with(theta, k, None, FloatModel::default().if_cfg())
}

/// MARK with an explicit comparison configuration and optional stop value.
pub fn build_mark_with(theta: f64, k: usize, stop: Option<f64>, cfg: IfCfg) -> Result<DeepRnn> {
    check_theta(theta)?;
    if k == 0 {
        return Err(Error::Validation("k must be at least 1".into()));
    }
    let (st, wi) = mark_stages(theta, k, stop, cfg);
    DeepRnn::new(st, wi)
}

/// ESTIMATOR followed by MARK, capped by Σρ̃² − eps_tol².
pub fn build_adaptive(p: &AdaptiveParams) -> Result<DeepRnn> {
    build_adaptive_with(p, Windows::default(), FloatModel::default())
}

pub fn build_adaptive_with(p: &AdaptiveParams, w: Windows, fm: FloatModel) -> Result<DeepRnn> {
    p.validate()?;
    let est = build_estimator_with(p.n, w, fm);
    let (mut st, mut wi) = mark_stages(p.theta, p.k, Some(p.eps_tol * p.eps_tol), fm.if_cfg());
    st.insert(0, est);
    wi.insert(1, Wiring::Plain);
    DeepRnn::new(st, wi)
}
