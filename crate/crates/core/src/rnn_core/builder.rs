//! Layer-by-layer construction of ReLU networks from named channels.
//!
//! A channel is a value living in the current frontier (the activations fed to
//! the next weight matrix). Nonnegative values occupy one row; signed values
//! occupy a pair of rows holding max(y,0) and max(−y,0). Every layer carries all
//! live channels forward, so callers only describe the new nodes.

use super::{Dnn, Matrix, ParamTable, Scale, Tag, UNIT};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Chan(u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Repr {
    Raw { col: u32, nonneg: bool },
    Pos(u32),
    Pair(u32, u32),
    Zero,
}

#[derive(Clone, Debug)]
struct ChanState {
    repr: Repr,
    refs: u32,
    gen: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Src {
    Const,
    Chan(Chan),
    /// |c|, available without a layer when c is materialized.
    Abs(Chan),
    /// max(c, 0).
    PosPart(Chan),
    /// max(−c, 0).
    NegPart(Chan),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Term {
    pub src: Src,
    pub param: u32,
    pub scale: Scale,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    Relu,
    Signed,
}

#[derive(Clone, Debug)]
pub struct Node {
    kind: Kind,
    terms: Vec<Term>,
}

impl Node {
    /// max(Σ terms, 0), carried as a nonnegative channel.
    pub fn relu(terms: Vec<Term>) -> Node {
        Node { kind: Kind::Relu, terms }
    }

    /// Σ terms exactly, carried as a pair of rows.
    pub fn signed(terms: Vec<Term>) -> Node {
        Node { kind: Kind::Signed, terms }
    }
}

pub struct NetBuilder {
    params: ParamTable,
    unit: u32,
    chans: Vec<ChanState>,
    layers: Vec<Matrix>,
    /// Number of input columns (including the constant) or rows of the last layer.
    frontier: usize,
    gen: u32,
    /// Live channels in carry order.
    live: Vec<Chan>,
}

impl NetBuilder {
    /// `nonneg[i]` declares that input i is never negative.
    pub fn new(nonneg: Vec<bool>) -> NetBuilder {
        let mut params = ParamTable::default();
        let unit = params.intern(UNIT, 1.0);
        let mut b = NetBuilder {
            params,
            unit,
            chans: vec![],
            layers: vec![],
            frontier: nonneg.len() + 1,
            gen: 0,
            live: vec![],
        };
        for (i, nn) in nonneg.into_iter().enumerate() {
            let c = b.push(Repr::Raw { col: i as u32 + 1, nonneg: nn });
            b.live.push(c);
        }
        b
    }

    fn push(&mut self, repr: Repr) -> Chan {
        self.chans.push(ChanState { repr, refs: 1, gen: self.gen });
        Chan(self.chans.len() as u32 - 1)
    }

    pub fn inputs(&self) -> Vec<Chan> {
        (0..self.chans.len() as u32)
            .map(Chan)
            .filter(|c| matches!(self.chans[c.0 as usize].repr, Repr::Raw { .. }))
            .collect()
    }

    pub fn zero(&mut self) -> Chan {
        self.push(Repr::Zero)
    }

    pub fn is_zero(&self, c: Chan) -> bool {
        self.chans[c.0 as usize].repr == Repr::Zero
    }

    /// Whether the channel is still an unprocessed input column.
    pub fn is_raw(&self, c: Chan) -> bool {
        matches!(self.chans[c.0 as usize].repr, Repr::Raw { .. })
    }

    /// Unit-parameter handle, for building terms by hand.
    pub fn unit(&self) -> u32 {
        self.unit
    }

    /// Whether the channel is known to be nonnegative.
    pub fn nonneg(&self, c: Chan) -> bool {
        match self.chans[c.0 as usize].repr {
            Repr::Raw { nonneg, .. } => nonneg,
            Repr::Pos(_) | Repr::Zero => true,
            Repr::Pair(..) => false,
        }
    }

    pub fn retain(&mut self, c: Chan) {
        self.chans[c.0 as usize].refs += 1;
    }

    /// Drops one reference. A channel without references is not carried into
    /// the next layer, but that layer may still read it.
    pub fn release(&mut self, c: Chan) {
        let st = &mut self.chans[c.0 as usize];
        assert!(st.refs > 0, "channel released twice");
        st.refs -= 1;
    }

    pub fn release_all(&mut self, cs: &[Chan]) {
        for &c in cs {
            self.release(c);
        }
    }

    pub fn param(&mut self, name: &str, value: f64) -> u32 {
        self.params.intern(name, value)
    }

    pub fn params(&self) -> &ParamTable {
        &self.params
    }

    pub fn t(&self, c: Chan, s: Scale) -> Term {
        Term { src: Src::Chan(c), param: self.unit, scale: s }
    }

    pub fn unit_term(&self, c: Chan) -> Term {
        self.t(c, Scale::ONE)
    }

    pub fn neg_term(&self, c: Chan) -> Term {
        self.t(c, Scale::NEG)
    }

    pub fn abs(&self, c: Chan, s: Scale) -> Term {
        Term { src: Src::Abs(c), param: self.unit, scale: s }
    }

    pub fn pos(&self, c: Chan, s: Scale) -> Term {
        Term { src: Src::PosPart(c), param: self.unit, scale: s }
    }

    pub fn neg(&self, c: Chan, s: Scale) -> Term {
        Term { src: Src::NegPart(c), param: self.unit, scale: s }
    }

    /// The same source with another unit-parameter scale.
    pub fn rescale(&self, t: Term, s: Scale) -> Term {
        Term { src: t.src, param: t.param, scale: s }
    }

    pub fn tc(&self, s: Scale) -> Term {
        Term { src: Src::Const, param: self.unit, scale: s }
    }

    pub fn tw(&mut self, c: Chan, name: &str, value: f64) -> Term {
        let p = self.param(name, value);
        Term { src: Src::Chan(c), param: p, scale: Scale::ONE }
    }

    pub fn tw_scaled(&mut self, c: Chan, name: &str, value: f64, s: Scale) -> Term {
        let p = self.param(name, value);
        Term { src: Src::Chan(c), param: p, scale: s }
    }

    pub fn tcw(&mut self, name: &str, value: f64, s: Scale) -> Term {
        let p = self.param(name, value);
        Term { src: Src::Const, param: p, scale: s }
    }

    pub fn layers_emitted(&self) -> usize {
        self.layers.len()
    }

    pub fn frontier_width(&self) -> usize {
        self.frontier
    }

    fn term_nonneg(&self, t: &Term) -> bool {
        let w = self.params.value(t.param) * t.scale.factor();
        let src_nonneg = match t.src {
            Src::Chan(c) => self.nonneg(c),
            _ => true,
        };
        w >= 0.0 && src_nonneg
    }

    fn expand(&self, t: &Term, neg: bool, out: &mut Vec<(u32, Tag)>) {
        let scale = if neg { t.scale.neg() } else { t.scale };
        let tag = Tag { param: t.param, scale };
        let c = match t.src {
            Src::Const => {
                out.push((0, tag));
                return;
            }
            Src::Chan(c) | Src::Abs(c) | Src::PosPart(c) | Src::NegPart(c) => c,
        };
        let st = &self.chans[c.0 as usize];
        if st.repr != Repr::Zero {
            assert_eq!(st.gen, self.gen, "channel {c:?} read outside its layer");
        }
        let other = Tag { param: t.param, scale: scale.neg() };
        match (t.src, st.repr) {
            (_, Repr::Zero) => {}
            (Src::Chan(_), Repr::Raw { col, .. }) => out.push((col, tag)),
            (Src::Chan(_), Repr::Pos(r)) => out.push((r, tag)),
            (Src::Chan(_), Repr::Pair(p, m)) => {
                out.push((p, tag));
                out.push((m, other));
            }
            (Src::NegPart(_), Repr::Pos(_)) | (Src::NegPart(_), Repr::Raw { nonneg: true, .. }) => {}
            (_, Repr::Raw { col, nonneg: true }) => out.push((col, tag)),
            (_, Repr::Raw { nonneg: false, .. }) => panic!("sign parts of a raw signed input need a layer first"),
            (_, Repr::Pos(r)) => out.push((r, tag)),
            (Src::Abs(_), Repr::Pair(p, m)) => {
                out.push((p, tag));
                out.push((m, tag));
            }
            (Src::PosPart(_), Repr::Pair(p, _)) => out.push((p, tag)),
            (Src::NegPart(_), Repr::Pair(_, m)) => out.push((m, tag)),
            (Src::Const, _) => unreachable!(),
        }
    }

    /// Emits one ReLU layer holding `nodes` followed by every live channel.
    pub fn layer(&mut self, nodes: &[Node]) -> Vec<Chan> {
        let mut m = Matrix::new(self.frontier);
        let mut buf = Vec::new();
        // constant row
        m.push_row([(0, Tag { param: self.unit, scale: Scale::ONE })], &self.params);
        let mut reprs = Vec::with_capacity(nodes.len());
        for n in nodes {
            buf.clear();
            for t in &n.terms {
                self.expand(t, false, &mut buf);
            }
            if buf.is_empty() {
                reprs.push(Repr::Zero);
                continue;
            }
            let nonneg = n.kind == Kind::Relu || n.terms.iter().all(|t| self.term_nonneg(t));
            let r = m.rows() as u32;
            m.push_row(buf.iter().copied(), &self.params);
            if nonneg {
                reprs.push(Repr::Pos(r));
            } else {
                buf.clear();
                for t in &n.terms {
                    self.expand(t, true, &mut buf);
                }
                m.push_row(buf.iter().copied(), &self.params);
                reprs.push(Repr::Pair(r, r + 1));
            }
        }
        let unit = Tag { param: self.unit, scale: Scale::ONE };
        let neg = Tag { param: self.unit, scale: Scale::NEG };
        let mut still = Vec::with_capacity(self.live.len());
        let live = std::mem::take(&mut self.live);
        for c in live {
            let st = &self.chans[c.0 as usize];
            if st.refs == 0 || st.repr == Repr::Zero {
                continue;
            }
            let r = m.rows() as u32;
            let repr = match st.repr {
                Repr::Raw { col, nonneg: true } => {
                    m.push_row([(col, unit)], &self.params);
                    Repr::Pos(r)
                }
                Repr::Raw { col, nonneg: false } => {
                    m.push_row([(col, unit)], &self.params);
                    m.push_row([(col, neg)], &self.params);
                    Repr::Pair(r, r + 1)
                }
                Repr::Pos(k) => {
                    m.push_row([(k, unit)], &self.params);
                    Repr::Pos(r)
                }
                Repr::Pair(p, q) => {
                    m.push_row([(p, unit)], &self.params);
                    m.push_row([(q, unit)], &self.params);
                    Repr::Pair(r, r + 1)
                }
                Repr::Zero => unreachable!(),
            };
            still.push((c, repr));
        }
        self.gen += 1;
        self.frontier = m.rows();
        self.layers.push(m);
        for (c, repr) in still {
            let st = &mut self.chans[c.0 as usize];
            st.repr = repr;
            st.gen = self.gen;
            self.live.push(c);
        }
        let mut out = Vec::with_capacity(nodes.len());
        for repr in reprs {
            let c = self.push(repr);
            if repr != Repr::Zero {
                self.live.push(c);
            }
            out.push(c);
        }
        out
    }

    /// Embeds the given networks side by side, each reading its input channels,
    /// and returns their output channels. Evaluation is bit-identical to
    /// evaluating each network on its own. Input channels are not released.
    pub fn apply(&mut self, blocks: &[(&Dnn, Vec<Chan>)]) -> Vec<Vec<Chan>> {
        struct Run {
            /// Source for each column of the block's current layer input.
            cols: Vec<Option<Src>>,
            pmap: Vec<u32>,
            out: Option<Vec<Chan>>,
        }
        let mut runs: Vec<Run> = Vec::with_capacity(blocks.len());
        for (dnn, ins) in blocks {
            assert_eq!(ins.len(), dnn.input_size(), "block input arity");
            let mut cols = Vec::with_capacity(ins.len() + 1);
            if dnn.const_slot() {
                cols.push(Some(Src::Const));
            }
            cols.extend(ins.iter().map(|&c| Some(Src::Chan(c))));
            let pmap = (0..dnn.params().len() as u32)
                .map(|i| self.params.intern(dnn.params().name(i), dnn.params().value(i)))
                .collect();
            runs.push(Run { cols, pmap, out: None });
        }
        let max_depth = blocks.iter().map(|(d, _)| d.depth()).max().unwrap_or(0);
        for l in 0..=max_depth {
            let mut nodes = Vec::new();
            // (block, row -> node index or const)
            let mut plan: Vec<(usize, Vec<Option<Result<usize, ()>>>)> = Vec::new();
            for (bi, (dnn, _)) in blocks.iter().enumerate() {
                if l > dnn.depth() {
                    continue;
                }
                let mat = &dnn.layers()[l];
                let last = l == dnn.depth();
                let run = &runs[bi];
                let mut rowmap = Vec::with_capacity(mat.rows());
                for r in 0..mat.rows() {
                    let mut terms = Vec::new();
                    let mut only_const_one = true;
                    let mut n_entries = 0;
                    for (c, v, tag) in mat.row(r) {
                        n_entries += 1;
                        let src = run.cols[c as usize];
                        match src {
                            None => {
                                only_const_one = false;
                            }
                            Some(s) => {
                                if !(s == Src::Const && v == 1.0) {
                                    only_const_one = false;
                                }
                                if let Src::Chan(ch) = s {
                                    if self.is_zero(ch) {
                                        continue;
                                    }
                                }
                                terms.push(Term { src: s, param: run.pmap[tag.param as usize], scale: tag.scale });
                            }
                        }
                    }
                    if !last && n_entries == 1 && only_const_one {
                        rowmap.push(Some(Err(())));
                        continue;
                    }
                    if terms.is_empty() {
                        rowmap.push(None);
                        continue;
                    }
                    let node = if !last || dnn.out_nonneg()[r] { Node::relu(terms) } else { Node::signed(terms) };
                    rowmap.push(Some(Ok(nodes.len())));
                    nodes.push(node);
                }
                plan.push((bi, rowmap));
            }
            // internal channels of the previous layer are read once more, not carried
            if l > 0 {
                for (bi, _) in &plan {
                    for s in runs[*bi].cols.iter().flatten() {
                        if let Src::Chan(c) = s {
                            self.release(*c);
                        }
                    }
                }
            }
            let made = self.layer(&nodes);
            for (bi, rowmap) in plan {
                let run = &mut runs[bi];
                let mut next = Vec::with_capacity(rowmap.len());
                for e in rowmap {
                    next.push(match e {
                        Some(Ok(i)) => Some(Src::Chan(made[i])),
                        Some(Err(())) => Some(Src::Const),
                        None => {
                            let z = self.zero();
                            Some(Src::Chan(z))
                        }
                    });
                }
                if l == blocks[bi].0.depth() {
                    run.out = Some(
                        next.into_iter()
                            .map(|s| match s {
                                Some(Src::Chan(c)) => c,
                                _ => unreachable!("output rows are never constant passthroughs"),
                            })
                            .collect(),
                    );
                    run.cols = vec![];
                } else {
                    run.cols = next;
                }
            }
        }
        runs.into_iter().map(|r| r.out.expect("block finished")).collect()
    }

    /// Emits the final linear layer and returns the network.
    pub fn finish(mut self, outputs: &[Vec<Term>]) -> Dnn {
        let mut m = Matrix::new(self.frontier);
        let mut buf = Vec::new();
        let mut nonneg = Vec::with_capacity(outputs.len());
        for terms in outputs {
            buf.clear();
            for t in terms {
                self.expand(t, false, &mut buf);
            }
            m.push_row(buf.iter().copied(), &self.params);
            nonneg.push(terms.iter().all(|t| self.term_nonneg(t)));
        }
        self.layers.push(m);
        Dnn::from_parts(self.layers, self.params, true, nonneg)
    }

    /// Convenience: output each channel unchanged.
    pub fn finish_chans(self, outs: &[Chan]) -> Dnn {
        let terms: Vec<Vec<Term>> = outs.iter().map(|&c| vec![self.unit_term(c)]).collect();
        self.finish(&terms)
    }
}
