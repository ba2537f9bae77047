//! ReLU networks: feed-forward nets, basic recurrent nets and stacks of them.
//!
//! Every weight entry references a named parameter and a small power-of-two
//! scale tag, so repeated blocks share parameters and the number of
//! independent weights can be counted separately from the total.

mod builder;
pub mod hexfloat;
mod serial;

use std::collections::{BTreeSet, HashMap};

pub use builder::{Chan, NetBuilder, Node, Src, Term};

use crate::error::{Error, Result};

/// Name of the structural unit parameter used by identity carries. It is not
/// counted as an independent weight.
pub const UNIT: &str = "unit";

/// Signed power-of-two scale attached to a weight entry: ±2^e with e ∈ [−2, 2].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Scale(i8);

impl Scale {
    pub const ONE: Scale = Scale(3);
    pub const NEG: Scale = Scale(-3);
    pub const TWO: Scale = Scale(4);
    pub const FOUR: Scale = Scale(5);
    pub const HALF: Scale = Scale(2);
    pub const QUARTER: Scale = Scale(1);

    pub const fn new(negative: bool, exp2: i8) -> Scale {
        assert!(exp2 >= -2 && exp2 <= 2, "scale exponent out of range");
        let c = exp2 + 3;
        Scale(if negative { -c } else { c })
    }

    pub fn from_code(code: i8) -> Option<Scale> {
        (code != 0 && code.abs() <= 5).then_some(Scale(code))
    }

    pub fn code(self) -> i8 {
        self.0
    }

    pub fn factor(self) -> f64 {
        let m = 2f64.powi(self.0.abs() as i32 - 3);
        if self.0 < 0 {
            -m
        } else {
            m
        }
    }

    pub fn neg(self) -> Scale {
        Scale(-self.0)
    }

    pub fn is_negative(self) -> bool {
        self.0 < 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Tag {
    pub param: u32,
    pub scale: Scale,
}

/// Named parameters of a network. Names identify parameters across networks.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamTable {
    names: Vec<String>,
    values: Vec<f64>,
    index: HashMap<String, u32>,
}

impl ParamTable {
    pub fn intern(&mut self, name: &str, value: f64) -> u32 {
        if let Some(&i) = self.index.get(name) {
            let old = self.values[i as usize];
            assert!(
                old.to_bits() == value.to_bits(),
                "parameter {name} registered with two values ({old} vs {value})"
            );
            return i;
        }
        let i = self.names.len() as u32;
        self.names.push(name.to_string());
        self.values.push(value);
        self.index.insert(name.to_string(), i);
        i
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, i: u32) -> &str {
        &self.names[i as usize]
    }

    pub fn value(&self, i: u32) -> f64 {
        self.values[i as usize]
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.index.get(name).map(|&i| self.values[i as usize])
    }

    pub fn id(&self, name: &str) -> Option<u32> {
        self.index.get(name).copied()
    }

    fn set(&mut self, i: u32, v: f64) {
        self.values[i as usize] = v;
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.names.iter().map(|s| s.as_str()).zip(self.values.iter().copied())
    }
}

/// Sparse matrix in row-compressed form. Entries within a row are summed in
/// stored order.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    row_ptr: Vec<u32>,
    col_idx: Vec<u32>,
    vals: Vec<f64>,
    tags: Vec<Tag>,
}

impl Matrix {
    pub fn new(cols: usize) -> Matrix {
        Matrix { rows: 0, cols, row_ptr: vec![0], col_idx: vec![], vals: vec![], tags: vec![] }
    }

    pub fn push_row(&mut self, entries: impl IntoIterator<Item = (u32, Tag)>, params: &ParamTable) {
        for (c, t) in entries {
            debug_assert!((c as usize) < self.cols);
            self.col_idx.push(c);
            self.vals.push(params.value(t.param) * t.scale.factor());
            self.tags.push(t);
        }
        self.row_ptr.push(self.col_idx.len() as u32);
        self.rows += 1;
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (u32, f64, Tag)> + '_ {
        let (a, b) = (self.row_ptr[r] as usize, self.row_ptr[r + 1] as usize);
        (a..b).map(move |k| (self.col_idx[k], self.vals[k], self.tags[k]))
    }

    /// Dense copy, mainly for tests and small nets.
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.cols]; self.rows];
        for (r, row) in d.iter_mut().enumerate() {
            for (c, v, _) in self.row(r) {
                row[c as usize] += v;
            }
        }
        d
    }

    fn refresh(&mut self, params: &ParamTable) {
        for (v, t) in self.vals.iter_mut().zip(&self.tags) {
            *v = params.value(t.param) * t.scale.factor();
        }
    }

    #[inline]
    fn apply(&self, x: &[f64], out: &mut [f64], relu: bool) {
        let ptr = &self.row_ptr;
        for (r, o) in out.iter_mut().enumerate().take(self.rows) {
            let (a, b) = (ptr[r] as usize, ptr[r + 1] as usize);
            let mut acc = 0.0;
            for (&w, &c) in self.vals[a..b].iter().zip(&self.col_idx[a..b]) {
                acc += w * x[c as usize];
            }
            *o = if relu && !(acc > 0.0) { 0.0 } else { acc };
        }
    }
}

/// Feed-forward ReLU network y = W_d φ(W_{d−1} ⋯ φ(W_0 x)).
///
/// With `const_slot` the first input column is fed the constant 1 and row 0 of
/// every hidden layer carries that constant forward, which stands in for biases.
#[derive(Clone, Debug, PartialEq)]
pub struct Dnn {
    layers: Vec<Matrix>,
    params: ParamTable,
    const_slot: bool,
    out_nonneg: Vec<bool>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WeightBudget {
    /// Σ s_{j+1}·s_j over all weight matrices.
    pub total_weights: usize,
    /// Distinct non-structural parameters referenced by some entry.
    pub independent_weights: usize,
    pub nonzero_weights: usize,
}

/// Reusable buffers for repeated evaluation.
#[derive(Default, Clone)]
pub struct Workspace {
    a: Vec<f64>,
    b: Vec<f64>,
}

impl Dnn {
    /// Builds a net from dense matrices; every nonzero entry gets its own
    /// parameter named `{prefix}.{layer}.{row}.{col}`.
    pub fn from_dense(prefix: &str, mats: &[Vec<Vec<f64>>], const_slot: bool) -> Result<Dnn> {
        if mats.is_empty() {
            return Err(Error::Dimension("a network needs at least one matrix".into()));
        }
        let mut params = ParamTable::default();
        let mut layers = Vec::with_capacity(mats.len());
        let mut prev_rows = None;
        for (l, m) in mats.iter().enumerate() {
            let cols = m.first().map_or(0, |r| r.len());
            if m.iter().any(|r| r.len() != cols) {
                return Err(Error::Dimension(format!("ragged matrix {l}")));
            }
            if let Some(p) = prev_rows {
                if p != cols {
                    return Err(Error::Dimension(format!("matrix {l} has {cols} columns, expected {p}")));
                }
            }
            let mut mat = Matrix::new(cols);
            for (r, row) in m.iter().enumerate() {
                let entries: Vec<(u32, Tag)> = row
                    .iter()
                    .enumerate()
                    .filter(|(_, v)| **v != 0.0)
                    .map(|(c, &v)| {
                        let p = params.intern(&format!("{prefix}.{l}.{r}.{c}"), v);
                        (c as u32, Tag { param: p, scale: Scale::ONE })
                    })
                    .collect();
                mat.push_row(entries, &params);
            }
            prev_rows = Some(m.len());
            layers.push(mat);
        }
        let outs = layers.last().unwrap().rows();
        Ok(Dnn { layers, params, const_slot, out_nonneg: vec![false; outs] })
    }

    pub(crate) fn from_parts(layers: Vec<Matrix>, params: ParamTable, const_slot: bool, out_nonneg: Vec<bool>) -> Dnn {
        Dnn { layers, params, const_slot, out_nonneg }
    }

    /// The identity on `dim` values realized as max(x,0) − max(−x,0) through `depth` hidden layers.
    pub fn identity(dim: usize, depth: usize) -> Dnn {
        let mut b = NetBuilder::new(vec![false; dim]);
        let mut cur = b.inputs();
        for _ in 0..depth.max(1) {
            let nodes: Vec<Node> = cur.iter().map(|&c| Node::signed(vec![b.unit_term(c)])).collect();
            let next = b.layer(&nodes);
            for c in cur {
                b.release(c);
            }
            cur = next;
        }
        let outs: Vec<Vec<Term>> = cur.iter().map(|&c| vec![b.unit_term(c)]).collect();
        b.finish(&outs)
    }

    pub fn input_size(&self) -> usize {
        self.layers[0].cols() - usize::from(self.const_slot)
    }

    pub fn output_size(&self) -> usize {
        self.layers.last().unwrap().rows()
    }

    pub fn depth(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn width(&self) -> usize {
        let mut w = self.layers[0].cols();
        for m in &self.layers {
            w = w.max(m.rows());
        }
        w
    }

    pub fn layers(&self) -> &[Matrix] {
        &self.layers
    }

    pub fn params(&self) -> &ParamTable {
        &self.params
    }

    pub fn const_slot(&self) -> bool {
        self.const_slot
    }

    pub fn out_nonneg(&self) -> &[bool] {
        &self.out_nonneg
    }

    pub fn budget(&self) -> WeightBudget {
        let total = self.layers.iter().map(|m| m.rows() * m.cols()).sum();
        let nnz = self.layers.iter().map(Matrix::nnz).sum();
        WeightBudget { total_weights: total, independent_weights: self.independent_names().len(), nonzero_weights: nnz }
    }

    pub(crate) fn independent_names(&self) -> BTreeSet<String> {
        let mut used = vec![false; self.params.len()];
        for m in &self.layers {
            for t in &m.tags {
                used[t.param as usize] = true;
            }
        }
        used.iter()
            .enumerate()
            .filter(|(i, u)| **u && self.params.name(*i as u32) != UNIT)
            .map(|(i, _)| self.params.name(i as u32).to_string())
            .collect()
    }

    /// Sets a named parameter and refreshes every entry that references it.
    pub fn set_param(&mut self, name: &str, value: f64) -> Result<()> {
        let id = self.params.id(name).ok_or_else(|| Error::Validation(format!("unknown parameter {name}")))?;
        self.params.set(id, value);
        for m in &mut self.layers {
            if m.tags.iter().any(|t| t.param == id) {
                m.refresh(&self.params);
            }
        }
        Ok(())
    }

    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_size() {
            return Err(Error::Dimension(format!("input has {} entries, net expects {}", x.len(), self.input_size())));
        }
        let mut ws = Workspace::default();
        let mut out = vec![0.0; self.output_size()];
        self.eval_into(x, &mut ws, &mut out);
        Ok(out)
    }

    /// Unchecked hot path; `x` and `out` must have the right sizes.
    pub fn eval_into(&self, x: &[f64], ws: &mut Workspace, out: &mut [f64]) {
        let Workspace { a, b } = ws;
        a.clear();
        if self.const_slot {
            a.push(1.0);
        }
        a.extend_from_slice(x);
        let last = self.layers.len() - 1;
        for (l, m) in self.layers.iter().enumerate() {
            if l == last {
                m.apply(a, out, false);
            } else {
                b.resize(m.rows(), 0.0);
                m.apply(a, b, true);
                std::mem::swap(a, b);
            }
        }
    }

    /// Drops every output row except `rows` (in that order).
    pub fn keep_outputs(&mut self, rows: &[usize]) {
        let last = self.layers.last().expect("nonempty net");
        let mut m = Matrix::new(last.cols());
        for &r in rows {
            let (a, b) = (last.row_ptr[r] as usize, last.row_ptr[r + 1] as usize);
            m.col_idx.extend_from_slice(&last.col_idx[a..b]);
            m.vals.extend_from_slice(&last.vals[a..b]);
            m.tags.extend_from_slice(&last.tags[a..b]);
            m.row_ptr.push(m.col_idx.len() as u32);
            m.rows += 1;
        }
        self.out_nonneg = rows.iter().map(|&r| self.out_nonneg[r]).collect();
        *self.layers.last_mut().unwrap() = m;
    }

    /// Runs both nets side by side on concatenated inputs.
    pub fn parallel(a: &Dnn, b: &Dnn) -> Dnn {
        let nn: Vec<bool> = vec![false; a.input_size() + b.input_size()];
        let mut nb = NetBuilder::new(nn);
        let ins = nb.inputs();
        let (ia, ib) = ins.split_at(a.input_size());
        let outs = nb.apply(&[(a, ia.to_vec()), (b, ib.to_vec())]);
        let terms: Vec<Vec<Term>> = outs.iter().flatten().map(|&c| vec![nb.unit_term(c)]).collect();
        nb.finish(&terms)
    }

    /// `a ∘ b`.
    pub fn compose(a: &Dnn, b: &Dnn) -> Result<Dnn> {
        if a.input_size() != b.output_size() {
            return Err(Error::Dimension(format!(
                "compose: outer takes {} inputs, inner yields {}",
                a.input_size(),
                b.output_size()
            )));
        }
        let mut nb = NetBuilder::new(vec![false; b.input_size()]);
        let ins = nb.inputs();
        nb.release_all(&ins);
        let mid = nb.apply(&[(b, ins)]).remove(0);
        nb.release_all(&mid);
        let out = nb.apply(&[(a, mid)]).remove(0);
        let terms: Vec<Vec<Term>> = out.iter().map(|&c| vec![nb.unit_term(c)]).collect();
        Ok(nb.finish(&terms))
    }
}

/// y_i = B(x_i, y_{i−1}) with y_0 = 0.
#[derive(Clone, Debug, PartialEq)]
pub struct BasicRnn {
    dnn: Dnn,
    input_size: usize,
    output_size: usize,
}

impl BasicRnn {
    pub fn new(dnn: Dnn, input_size: usize) -> Result<BasicRnn> {
        let output_size = dnn.output_size();
        if dnn.input_size() != input_size + output_size {
            return Err(Error::Dimension(format!(
                "recurrent net takes {} inputs, expected {} + {}",
                dnn.input_size(),
                input_size,
                output_size
            )));
        }
        Ok(BasicRnn { dnn, input_size, output_size })
    }

    pub fn dnn(&self) -> &Dnn {
        &self.dnn
    }

    pub fn dnn_mut(&mut self) -> &mut Dnn {
        &mut self.dnn
    }

    pub fn input_size(&self) -> usize {
        self.input_size
    }

    pub fn output_size(&self) -> usize {
        self.output_size
    }

    pub fn budget(&self) -> WeightBudget {
        self.dnn.budget()
    }

    pub fn eval(&self, xs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        for x in xs {
            if x.len() != self.input_size {
                return Err(Error::Dimension(format!("sequence entry has {} values, expected {}", x.len(), self.input_size)));
            }
        }
        let flat: Vec<f64> = xs.concat();
        let out = self.eval_flat(&flat, xs.len());
        Ok(out.chunks(self.output_size.max(1)).map(|c| c.to_vec()).take(xs.len()).collect())
    }

    /// Flat variant: `xs` holds `n` consecutive entries of `input_size` values.
    pub fn eval_flat(&self, xs: &[f64], n: usize) -> Vec<f64> {
        let (s, so) = (self.input_size, self.output_size);
        let mut out = vec![0.0; n * so];
        let mut ws = Workspace::default();
        let mut inp = vec![0.0; s + so];
        let mut y = vec![0.0; so];
        for i in 0..n {
            inp[..s].copy_from_slice(&xs[i * s..(i + 1) * s]);
            if i > 0 {
                inp[s..].copy_from_slice(&out[(i - 1) * so..i * so]);
            }
            self.dnn.eval_into(&inp, &mut ws, &mut y);
            out[i * so..(i + 1) * so].copy_from_slice(&y);
        }
        out
    }

    /// The recurrence written out as one feed-forward net over a flattened
    /// length-`n` sequence, evaluating bit-identically to [`BasicRnn::eval`].
    pub fn unroll(&self, n: usize) -> Dnn {
        let (s, so) = (self.input_size, self.output_size);
        let mut b = NetBuilder::new(vec![false; n * s]);
        let ins = b.inputs();
        let mut prev: Vec<Chan> = (0..so).map(|_| b.zero()).collect();
        let mut ys = Vec::with_capacity(n * so);
        for t in 0..n {
            let mut args: Vec<Chan> = ins[t * s..(t + 1) * s].to_vec();
            args.extend_from_slice(&prev);
            b.release_all(&ins[t * s..(t + 1) * s]);
            let y = b.apply(&[(&self.dnn, args)]).remove(0);
            ys.extend_from_slice(&y);
            prev = y;
        }
        let terms: Vec<Vec<Term>> = ys.iter().map(|&c| vec![b.unit_term(c)]).collect();
        b.finish(&terms)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Wiring {
    Plain,
    /// Input of the stage is (y_i, δ_{i1}·y_n) built from the previous stage.
    InitWithLast,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeepRnn {
    stages: Vec<BasicRnn>,
    wiring: Vec<Wiring>,
}

impl DeepRnn {
    pub fn new(stages: Vec<BasicRnn>, wiring: Vec<Wiring>) -> Result<DeepRnn> {
        if stages.is_empty() || stages.len() != wiring.len() {
            return Err(Error::Dimension("stage and wiring lists must be nonempty and of equal length".into()));
        }
        if wiring[0] != Wiring::Plain {
            return Err(Error::Dimension("the first stage reads the raw sequence".into()));
        }
        for i in 1..stages.len() {
            let prev = stages[i - 1].output_size();
            let want = match wiring[i] {
                Wiring::Plain => prev,
                Wiring::InitWithLast => 2 * prev,
            };
            if stages[i].input_size() != want {
                return Err(Error::Dimension(format!(
                    "stage {i} takes {} inputs, wiring provides {want}",
                    stages[i].input_size()
                )));
            }
        }
        Ok(DeepRnn { stages, wiring })
    }

    pub fn single(stage: BasicRnn) -> DeepRnn {
        DeepRnn { stages: vec![stage], wiring: vec![Wiring::Plain] }
    }

    /// Appends the stages of `next` after those of `self`; `link` is the wiring of
    /// the first appended stage.
    pub fn then(mut self, next: DeepRnn, link: Wiring) -> Result<DeepRnn> {
        let mut wiring = next.wiring;
        wiring[0] = link;
        self.stages.extend(next.stages);
        self.wiring.extend(wiring);
        DeepRnn::new(self.stages, self.wiring)
    }

    pub fn stages(&self) -> &[BasicRnn] {
        &self.stages
    }

    pub fn wiring(&self) -> &[Wiring] {
        &self.wiring
    }

    pub fn input_size(&self) -> usize {
        self.stages[0].input_size()
    }

    pub fn output_size(&self) -> usize {
        self.stages.last().unwrap().output_size()
    }

    pub fn budget(&self) -> WeightBudget {
        let mut names = BTreeSet::new();
        let (mut total, mut nnz) = (0, 0);
        for s in &self.stages {
            let b = s.budget();
            total += b.total_weights;
            nnz += b.nonzero_weights;
            names.extend(s.dnn().independent_names());
        }
        WeightBudget { total_weights: total, independent_weights: names.len(), nonzero_weights: nnz }
    }

    pub fn eval(&self, xs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let s = self.input_size();
        for x in xs {
            if x.len() != s {
                return Err(Error::Dimension(format!("sequence entry has {} values, expected {s}", x.len())));
            }
        }
        let flat: Vec<f64> = xs.concat();
        let so = self.output_size();
        let out = self.eval_flat(&flat, xs.len());
        Ok((0..xs.len()).map(|i| out[i * so..(i + 1) * so].to_vec()).collect())
    }

    pub fn eval_flat(&self, xs: &[f64], n: usize) -> Vec<f64> {
        let mut cur = self.stages[0].eval_flat(xs, n);
        for (st, w) in self.stages.iter().zip(&self.wiring).skip(1) {
            let input = match w {
                Wiring::Plain => cur,
                Wiring::InitWithLast => {
                    let so = cur.len() / n.max(1);
                    let mut wide = vec![0.0; n * 2 * so];
                    for i in 0..n {
                        wide[i * 2 * so..i * 2 * so + so].copy_from_slice(&cur[i * so..(i + 1) * so]);
                    }
                    if n > 0 {
                        wide[so..2 * so].copy_from_slice(&cur[(n - 1) * so..n * so]);
                    }
                    wide
                }
            };
            cur = st.eval_flat(&input, n);
        }
        cur
    }

    /// Feed-forward form for inputs of the shape (x, 0, …, 0) of length `n`:
    /// takes x and returns the last output entry of the final stage.
    pub fn unroll_impulse(&self, n: usize) -> Dnn {
        let mut b = NetBuilder::new(vec![false; self.input_size()]);
        let ins = b.inputs();
        let out = self.emit_impulse(&mut b, &[ins], n).remove(0);
        b.finish_chans(&out)
    }

    /// Evaluates the impulse pattern (x, 0, …, 0) of length `n` and returns the
    /// last output entry.
    pub fn eval_impulse(&self, x: &[f64], n: usize) -> Vec<f64> {
        let s = self.input_size();
        assert_eq!(x.len(), s);
        let mut flat = vec![0.0; s * n];
        flat[..s].copy_from_slice(x);
        let out = self.eval_flat(&flat, n);
        let so = self.output_size();
        out[(n - 1) * so..].to_vec()
    }

    /// Emits impulse evaluations of several independent instances in lockstep.
    /// The caller keeps ownership of the input channels.
    pub fn emit_impulse(&self, b: &mut NetBuilder, xs: &[Vec<Chan>], n: usize) -> Vec<Vec<Chan>> {
        assert!(n >= 1);
        let lanes = xs.len();
        // runs of stages linked by plain wiring are interleaved in time
        let mut runs: Vec<(usize, usize)> = vec![];
        let mut start = 0;
        for i in 1..=self.stages.len() {
            if i == self.stages.len() || self.wiring[i] == Wiring::InitWithLast {
                runs.push((start, i));
                start = i;
            }
        }
        // per lane: the sequence feeding the current run (None = all zero) and
        // the last entry of the previous run
        let mut feed: Vec<Option<Vec<Vec<Chan>>>> = vec![None; lanes];
        let mut last: Vec<Vec<Chan>> = vec![vec![]; lanes];
        for (ri, &(lo, hi)) in runs.iter().enumerate() {
            let keep_all = ri + 1 < runs.len() && uses_plain_part(&self.stages[runs[ri + 1].0]);
            let mut state: Vec<Vec<Vec<Chan>>> = (0..lanes)
                .map(|_| (lo..hi).map(|k| (0..self.stages[k].output_size()).map(|_| b.zero()).collect()).collect())
                .collect();
            let mut outs: Vec<Vec<Vec<Chan>>> = vec![vec![]; lanes];
            for t in 0..n {
                let mut inp: Vec<Vec<Chan>> = (0..lanes)
                    .map(|j| {
                        if ri == 0 {
                            if t == 0 {
                                for &c in &xs[j] {
                                    b.retain(c);
                                }
                                xs[j].clone()
                            } else {
                                (0..xs[j].len()).map(|_| b.zero()).collect()
                            }
                        } else {
                            let so = last[j].len();
                            let mut v: Vec<Chan> = match &feed[j] {
                                Some(seq) => {
                                    for &c in &seq[t] {
                                        b.retain(c);
                                    }
                                    seq[t].clone()
                                }
                                None => (0..so).map(|_| b.zero()).collect(),
                            };
                            if t == 0 {
                                for &c in &last[j] {
                                    b.retain(c);
                                }
                                v.extend_from_slice(&last[j]);
                            } else {
                                v.extend((0..so).map(|_| b.zero()));
                            }
                            v
                        }
                    })
                    .collect();
                for k in lo..hi {
                    let dnn = self.stages[k].dnn();
                    let calls: Vec<(&Dnn, Vec<Chan>)> = (0..lanes)
                        .map(|j| {
                            let mut a = inp[j].clone();
                            a.extend_from_slice(&state[j][k - lo]);
                            (dnn, a)
                        })
                        .collect();
                    for j in 0..lanes {
                        b.release_all(&inp[j]);
                        b.release_all(&state[j][k - lo]);
                    }
                    let ys = b.apply(&calls);
                    for (j, y) in ys.into_iter().enumerate() {
                        for &c in &y {
                            b.retain(c);
                        }
                        state[j][k - lo] = y.clone();
                        inp[j] = y;
                    }
                }
                for (j, y) in inp.into_iter().enumerate() {
                    if keep_all || t + 1 == n {
                        outs[j].push(y);
                    } else {
                        b.release_all(&y);
                    }
                }
            }
            for j in 0..lanes {
                for s in &state[j] {
                    b.release_all(s);
                }
                if let Some(seq) = feed[j].take() {
                    for v in seq {
                        b.release_all(&v);
                    }
                }
                if ri > 0 {
                    b.release_all(&last[j]);
                }
                let fin = outs[j].last().unwrap().clone();
                for &c in &fin {
                    b.retain(c);
                }
                last[j] = fin;
                let seq = std::mem::take(&mut outs[j]);
                if keep_all {
                    feed[j] = Some(seq);
                } else {
                    for v in seq {
                        b.release_all(&v);
                    }
                }
            }
        }
        last
    }

    /// Adds an identity channel that copies an extra input variable through every
    /// stage; it becomes the last input and the last output entry.
    pub fn pass_through(&self) -> DeepRnn {
        let mut stages = Vec::with_capacity(self.stages.len());
        for (k, st) in self.stages.iter().enumerate() {
            let s = st.input_size();
            let so = st.output_size();
            let init = k > 0 && self.wiring[k] == Wiring::InitWithLast;
            let new_s = s + if init { 2 } else { 1 };
            let mut b = NetBuilder::new(vec![false; new_s + so + 1]);
            let ins = b.inputs();
            let (orig, extra, unused): (Vec<Chan>, Chan, Vec<Chan>) = if init {
                let h = s / 2;
                let mut o = ins[..h].to_vec();
                o.extend_from_slice(&ins[h + 1..2 * h + 1]);
                (o, ins[h], vec![ins[2 * h + 1], ins[new_s + so]])
            } else {
                (ins[..s].to_vec(), ins[s], vec![ins[new_s + so]])
            };
            b.release_all(&unused);
            let mut args = orig.clone();
            args.extend_from_slice(&ins[new_s..new_s + so]);
            b.release_all(&args);
            let mut y = b.apply(&[(st.dnn(), args)]).remove(0);
            y.push(extra);
            stages.push(BasicRnn::new(b.finish_chans(&y), new_s).expect("widened stage"));
        }
        DeepRnn { stages, wiring: self.wiring.clone() }
    }
}

/// Whether the first layer of an init-with-last stage reads the per-step part
/// of its input (as opposed to only the broadcast last value).
fn uses_plain_part(st: &BasicRnn) -> bool {
    let dnn = st.dnn();
    let half = st.input_size() / 2;
    let off = usize::from(dnn.const_slot());
    let m = &dnn.layers()[0];
    (0..m.rows()).any(|r| m.row(r).any(|(c, v, _)| v != 0.0 && (c as usize) >= off && (c as usize) < off + half))
}

pub use serial::{read_deep_rnn, read_dnn, write_deep_rnn, write_dnn};
