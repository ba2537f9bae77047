use super::lanes::{self, emit_ifs, emit_max, sawtooth_step, square_in, square_out, IfCfg, IfSpec, SawLane};
use super::ImpulseBlock;
use crate::error::{Error, Result};
use crate::rnn_core::{BasicRnn, Chan, DeepRnn, Dnn, NetBuilder, Node, Scale, Src, Term, Wiring};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Comparator {
    Le,
    Ge,
    Lt,
    Gt,
}

impl Comparator {
    pub fn holds(self, b: f64, c: f64) -> bool {
        match self {
            Comparator::Le => b <= c,
            Comparator::Ge => b >= c,
            Comparator::Lt => b < c,
            Comparator::Gt => b > c,
        }
    }

    /// (sign of b in the strict comparison g = ±(b − c), output is the complement)
    fn form(self) -> (bool, bool) {
        match self {
            Comparator::Gt => (true, false),
            Comparator::Lt => (false, false),
            Comparator::Le => (true, true),
            Comparator::Ge => (false, true),
        }
    }

    fn g_terms(self, b: &NetBuilder, bb: Chan, cc: Chan) -> Vec<Term> {
        let (pos, _) = self.form();
        if pos {
            vec![b.t(bb, Scale::ONE), b.t(cc, Scale::NEG)]
        } else {
            vec![b.t(cc, Scale::ONE), b.t(bb, Scale::NEG)]
        }
    }
}

impl std::str::FromStr for Comparator {
    type Err = Error;
    fn from_str(s: &str) -> Result<Comparator> {
        Ok(match s {
            "<=" | "le" => Comparator::Le,
            ">=" | "ge" => Comparator::Ge,
            "<" | "lt" => Comparator::Lt,
            ">" | "gt" => Comparator::Gt,
            _ => return Err(Error::Validation(format!("unknown comparator `{s}`"))),
        })
    }
}

/// IF(a; b □ c) as a recurrence over `n_steps` entries fed with (a, b, c)
/// first and zeros afterwards. State: A₊, A₋, latched b − c, the two doubling
/// sequences v± = min(2 max(v± + g, 0), A±), and the result.
pub fn build_if(cmp: Comparator, n_steps: usize) -> ImpulseBlock {
    let (_, complement) = cmp.form();
    let mut b = NetBuilder::new(vec![false, false, false, true, true, false, true, true, false]);
    let x = b.inputs();
    let (a, bb, cc) = (x[0], x[1], x[2]);
    let (ap, am, gl, vp, vm, out) = (x[3], x[4], x[5], x[6], x[7], x[8]);
    b.release(out);
    let mut g = cmp.g_terms(&b, bb, cc);
    g.push(b.t(gl, Scale::ONE));
    let nodes = [
        Node::relu(vec![b.t(ap, Scale::ONE), b.t(a, Scale::ONE)]),
        Node::relu(vec![b.t(am, Scale::ONE), b.t(a, Scale::NEG)]),
        Node::signed(g),
    ];
    b.release_all(&[a, bb, cc, ap, am, gl]);
    let l1 = b.layer(&nodes);
    let (ap, am, gl) = (l1[0], l1[1], l1[2]);
    let nodes = [
        Node::relu(vec![b.t(vp, Scale::ONE), b.t(gl, Scale::ONE)]),
        Node::relu(vec![b.t(vm, Scale::ONE), b.t(gl, Scale::ONE)]),
    ];
    b.release_all(&[vp, vm]);
    let h = b.layer(&nodes);
    let nodes = [
        Node::relu(vec![b.t(ap, Scale::ONE), b.t(h[0], Scale::new(true, 1))]),
        Node::relu(vec![b.t(am, Scale::ONE), b.t(h[1], Scale::new(true, 1))]),
    ];
    b.release_all(&h);
    let k = b.layer(&nodes);
    let (kp, km) = (k[0], k[1]);
    let result = if complement {
        vec![b.t(kp, Scale::ONE), b.t(km, Scale::NEG)]
    } else {
        vec![b.t(ap, Scale::ONE), b.t(kp, Scale::NEG), b.t(am, Scale::NEG), b.t(km, Scale::ONE)]
    };
    let outs = vec![
        vec![b.t(ap, Scale::ONE)],
        vec![b.t(am, Scale::ONE)],
        vec![b.t(gl, Scale::ONE)],
        vec![b.t(ap, Scale::ONE), b.t(kp, Scale::NEG)],
        vec![b.t(am, Scale::ONE), b.t(km, Scale::NEG)],
        result,
    ];
    let dnn = b.finish(&outs);
    let rnn = BasicRnn::new(dnn, 3).expect("if stage");
    ImpulseBlock { rnn: DeepRnn::single(rnn), steps: n_steps, output: 5 }
}

/// IF(a; b □ c) as a feed-forward net on (a, b, c) using the doubling
/// R ← max(2R − A, 0) (or the single large weight 2^steps when `one_layer`).
pub fn build_if_direct(cmp: Comparator, cfg: IfCfg) -> Dnn {
    let (_, complement) = cmp.form();
    let mut b = NetBuilder::new(vec![false; 3]);
    let x = b.inputs();
    lanes::materialize(&mut b, &x);
    let g = cmp.g_terms(&b, x[1], x[2]);
    let spec = IfSpec { a: vec![b.t(x[0], Scale::ONE)], signed: true, g: 0 };
    b.release_all(&x);
    let o = emit_ifs(&mut b, &[g], &[spec], cfg).remove(0);
    let t = if complement { o.complement(&b, Scale::ONE) } else { o.strict(&b, Scale::ONE) };
    b.finish(&[t])
}

fn saw_stage(b: &mut NetBuilder, ts: &[(Chan, Chan, Chan)], inputs: &[(Chan, i32)]) -> Vec<Vec<Term>> {
    // latch t and feed w from the scaled |x| of the first entry
    let mut nodes = Vec::new();
    for (&(t, w, _), &(x, s)) in ts.iter().zip(inputs) {
        let p = square_in(b, s);
        let ax = Term { src: Src::Abs(x), param: p, scale: Scale::ONE };
        nodes.push(Node::relu(vec![b.t(t, Scale::ONE), ax]));
        nodes.push(Node::relu(vec![b.t(w, Scale::ONE), ax]));
    }
    for &(t, w, _) in ts {
        b.release(t);
        b.release(w);
    }
    for &(x, _) in inputs {
        b.release(x);
    }
    let made = b.layer(&nodes);
    let mut lanes: Vec<SawLane> = made.chunks(2).map(|c| SawLane { w: c[1], y: None, pending: None }).collect();
    sawtooth_step(b, &mut lanes);
    let sixteen = b.param("sq.sixteen", 16.0);
    let mut outs = Vec::new();
    for ((c, l), &(_, _, y)) in made.chunks(2).zip(&lanes).zip(ts) {
        let (u, v) = l.pending.unwrap();
        outs.push(vec![b.t(c[0], Scale::ONE)]);
        outs.push(vec![b.t(v, Scale::ONE)]);
        outs.push(vec![
            Term { src: Src::Chan(y), param: sixteen, scale: Scale::ONE },
            b.t(u, Scale::FOUR),
            b.t(v, Scale::ONE),
        ]);
    }
    outs
}

/// Square stages shared by SQUARE and MULTIPLY: stage 1 runs the sawtooth
/// recurrence on `lanes` squares, stage 2 latches t and divides the Horner sum
/// by 16 per step. `prep` builds the lanes' inputs from the raw stage inputs.
fn square_rnn(
    n_in: usize,
    windows: &[i32],
    prep: impl Fn(&mut NetBuilder, &[Chan]) -> Vec<Chan>,
    finish: impl Fn(&mut NetBuilder, &[Chan]) -> Vec<Vec<Term>>,
) -> DeepRnn {
    let k = windows.len();
    // stage 1: inputs, state (t, w, y) per lane
    let mut flags = vec![false; n_in];
    flags.extend(std::iter::repeat(true).take(3 * k));
    let mut b = NetBuilder::new(flags);
    let x = b.inputs();
    let (xin, st) = x.split_at(n_in);
    let lanes_in = prep(&mut b, xin);
    let ts: Vec<(Chan, Chan, Chan)> = st.chunks(3).map(|c| (c[0], c[1], c[2])).collect();
    let inputs: Vec<(Chan, i32)> = lanes_in.into_iter().zip(windows.iter().copied()).collect();
    let outs = saw_stage(&mut b, &ts, &inputs);
    let s1 = BasicRnn::new(b.finish(&outs), n_in).expect("square stage 1");

    // stage 2: (t, w, y) per lane and the broadcast copy, state (t, Y) per lane + results
    let mut flags = vec![true; 8 * k];
    flags.extend(std::iter::repeat(false).take(result_len(&finish, k)));
    let mut b = NetBuilder::new(flags);
    let x = b.inputs();
    let (bc, st) = (&x[3 * k..6 * k], &x[6 * k..]);
    let sixteenth = b.param("sq.sixteenth", 1.0 / 16.0);
    let mut nodes = Vec::new();
    for j in 0..k {
        nodes.push(Node::relu(vec![b.t(st[2 * j], Scale::ONE), b.t(bc[3 * j], Scale::ONE)]));
        nodes.push(Node::relu(vec![
            Term { src: Src::Chan(st[2 * j + 1]), param: sixteenth, scale: Scale::ONE },
            Term { src: Src::Chan(bc[3 * j + 2]), param: sixteenth, scale: Scale::ONE },
        ]));
    }
    b.release_all(&x);
    let ty = b.layer(&nodes);
    let nodes: Vec<Node> = (0..k)
        .map(|j| {
            let p = square_out(&mut b, windows[j]);
            Node::relu(vec![
                Term { src: Src::Chan(ty[2 * j]), param: p, scale: Scale::ONE },
                Term { src: Src::Chan(ty[2 * j + 1]), param: p, scale: Scale::NEG },
            ])
        })
        .collect();
    let q = b.layer(&nodes);
    let mut outs: Vec<Vec<Term>> = ty.iter().map(|&c| vec![b.t(c, Scale::ONE)]).collect();
    outs.extend(finish(&mut b, &q));
    let s2 = BasicRnn::new(b.finish(&outs), 6 * k).expect("square stage 2");
    DeepRnn::new(vec![s1, s2], vec![Wiring::Plain, Wiring::InitWithLast]).expect("square wiring")
}

fn result_len(finish: &impl Fn(&mut NetBuilder, &[Chan]) -> Vec<Vec<Term>>, k: usize) -> usize {
    let mut b = NetBuilder::new(vec![true; k]);
    let x = b.inputs();
    finish(&mut b, &x).len()
}

/// x² for |x| ≤ 2^s from the impulse (x, 0, …, 0) of length n: the linear
/// spline of t² at 4^n points, t = |x|/2^s, rescaled by 4^s.
pub fn build_square(n: usize, s: i32) -> ImpulseBlock {
    let rnn = square_rnn(
        1,
        &[s],
        |b, x| {
            lanes::materialize(b, x);
            x.to_vec()
        },
        |b, q| vec![vec![b.t(q[0], Scale::ONE)]],
    );
    let output = rnn.output_size() - 1;
    ImpulseBlock { rnn, steps: n, output }
}

/// (SQ(x+y) − SQ(x) − SQ(y))/2 with window 2^n, from the impulse ((x, y), 0, …).
pub fn build_multiply(n: usize) -> ImpulseBlock {
    let s = n as i32;
    let rnn = square_rnn(
        2,
        &[s, s, s],
        |b, x| {
            let sum = b.layer(&[Node::signed(vec![b.t(x[0], Scale::ONE), b.t(x[1], Scale::ONE)])])[0];
            vec![sum, x[0], x[1]]
        },
        |b, q| {
            vec![vec![b.t(q[0], Scale::HALF), b.t(q[1], Scale::new(true, -1)), b.t(q[2], Scale::new(true, -1))]]
        },
    );
    let output = rnn.output_size() - 1;
    ImpulseBlock { rnn, steps: n, output }
}

/// max of |coordinate differences| over the three edges of a triangle given
/// as (x0, y0, x1, y1, x2, y2).
pub fn build_diam() -> Dnn {
    let mut b = NetBuilder::new(vec![false; 6]);
    let x = b.inputs();
    let d = emit_diam(&mut b, &x);
    b.finish_chans(&[d])
}

/// Edge differences in the order (P2 − P1, P0 − P2, P1 − P0), x then y.
pub(crate) fn edge_diffs(b: &mut NetBuilder, p: &[Chan]) -> Vec<Chan> {
    let mut nodes = Vec::new();
    for j in 0..3 {
        let (s, e) = ((j + 1) % 3, (j + 2) % 3);
        for c in 0..2 {
            nodes.push(Node::signed(vec![b.t(p[2 * e + c], Scale::ONE), b.t(p[2 * s + c], Scale::NEG)]));
        }
    }
    b.layer(&nodes)
}

pub(crate) fn emit_diam(b: &mut NetBuilder, p: &[Chan]) -> Chan {
    let d = edge_diffs(b, p);
    let terms: Vec<Term> = d.iter().map(|&c| b.abs(c, Scale::ONE)).collect();
    b.release_all(&d);
    emit_max(b, &terms)
}
