//! Plain-text network format. Weights are written as hexadecimal floats so a
//! read after a write reproduces every bit.
//!
//! ```text
//! stages K
//! stage 0 wiring plain input S output S'
//! dnn const 1 layers L params P
//! param NAME HEXVALUE
//! nonneg 0 1
//! matrix ROWS COLS NNZ
//! ROW COL HEXVALUE PARAM SCALE
//! ```

use std::io::{BufRead, Write};

use super::{hexfloat, BasicRnn, DeepRnn, Dnn, Matrix, ParamTable, Scale, Tag, Wiring};
use crate::error::{Error, Result};

pub fn write_dnn(w: &mut impl Write, net: &Dnn) -> Result<()> {
    let p = net.params();
    writeln!(w, "dnn const {} layers {} params {}", u8::from(net.const_slot()), net.layers().len(), p.len())?;
    for (name, v) in p.iter() {
        writeln!(w, "param {name} {}", hexfloat::format(v))?;
    }
    let nn: Vec<&str> = net.out_nonneg().iter().map(|&b| if b { "1" } else { "0" }).collect();
    writeln!(w, "nonneg {}", nn.join(" "))?;
    for m in net.layers() {
        writeln!(w, "matrix {} {} {}", m.rows(), m.cols(), m.nnz())?;
        for r in 0..m.rows() {
            for (c, v, t) in m.row(r) {
                writeln!(w, "{r} {c} {} {} {}", hexfloat::format(v), t.param, t.scale.code())?;
            }
        }
    }
    Ok(())
}

pub fn write_deep_rnn(w: &mut impl Write, net: &DeepRnn) -> Result<()> {
    writeln!(w, "stages {}", net.stages().len())?;
    for (i, (st, wi)) in net.stages().iter().zip(net.wiring()).enumerate() {
        let wname = match wi {
            Wiring::Plain => "plain",
            Wiring::InitWithLast => "init_with_last",
        };
        writeln!(w, "stage {i} wiring {wname} input {} output {}", st.input_size(), st.output_size())?;
        write_dnn(w, st.dnn())?;
    }
    Ok(())
}

struct Lines<R> {
    inner: R,
    line: usize,
    buf: String,
}

impl<R: BufRead> Lines<R> {
    fn next(&mut self) -> Result<Vec<String>> {
        loop {
            self.buf.clear();
            if self.inner.read_line(&mut self.buf)? == 0 {
                return Err(self.err("unexpected end of input"));
            }
            self.line += 1;
            let toks: Vec<String> = self.buf.split_whitespace().map(str::to_string).collect();
            if !toks.is_empty() {
                return Ok(toks);
            }
        }
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse { line: self.line, msg: msg.into() }
    }

    fn expect(&mut self, key: &str, n: usize) -> Result<Vec<String>> {
        let t = self.next()?;
        if t[0] != key || t.len() < n {
            return Err(self.err(format!("expected `{key}` line")));
        }
        Ok(t)
    }

    fn num<T: std::str::FromStr>(&self, s: &str) -> Result<T> {
        s.parse().map_err(|_| self.err(format!("bad number `{s}`")))
    }

    fn hex(&self, s: &str) -> Result<f64> {
        hexfloat::parse(s).ok_or_else(|| self.err(format!("bad hex float `{s}`")))
    }
}

fn read_dnn_inner<R: BufRead>(lx: &mut Lines<R>) -> Result<Dnn> {
    let h = lx.expect("dnn", 7)?;
    let const_slot = lx.num::<u8>(&h[2])? == 1;
    let nlayers: usize = lx.num(&h[4])?;
    let nparams: usize = lx.num(&h[6])?;
    let mut params = ParamTable::default();
    for i in 0..nparams {
        let t = lx.expect("param", 3)?;
        let v = lx.hex(&t[2])?;
        if params.intern(&t[1], v) as usize != i {
            return Err(lx.err("duplicate parameter name"));
        }
    }
    let t = lx.next()?;
    if t[0] != "nonneg" {
        return Err(lx.err("expected `nonneg` line"));
    }
    let nonneg: Vec<bool> = t[1..].iter().map(|s| s == "1").collect();
    let mut layers = Vec::with_capacity(nlayers);
    for _ in 0..nlayers {
        let h = lx.expect("matrix", 4)?;
        let rows: usize = lx.num(&h[1])?;
        let cols: usize = lx.num(&h[2])?;
        let nnz: usize = lx.num(&h[3])?;
        let mut entries: Vec<Vec<(u32, Tag)>> = vec![vec![]; rows];
        for _ in 0..nnz {
            let e = lx.next()?;
            if e.len() != 5 {
                return Err(lx.err("matrix entry needs 5 fields"));
            }
            let r: usize = lx.num(&e[0])?;
            let c: u32 = lx.num(&e[1])?;
            let v = lx.hex(&e[2])?;
            let p: u32 = lx.num(&e[3])?;
            let code: i8 = lx.num(&e[4])?;
            let scale = Scale::from_code(code).ok_or_else(|| lx.err("bad scale code"))?;
            if r >= rows || c as usize >= cols || p as usize >= params.len() {
                return Err(lx.err("matrix entry out of range"));
            }
            if (params.value(p) * scale.factor()).to_bits() != v.to_bits() {
                return Err(lx.err("entry value disagrees with its parameter"));
            }
            entries[r].push((c, Tag { param: p, scale }));
        }
        let mut m = Matrix::new(cols);
        for row in entries {
            m.push_row(row, &params);
        }
        layers.push(m);
    }
    if layers.is_empty() {
        return Err(lx.err("network without layers"));
    }
    for i in 1..layers.len() {
        if layers[i].cols() != layers[i - 1].rows() {
            return Err(Error::Dimension(format!("matrix {i} does not chain")));
        }
    }
    if nonneg.len() != layers.last().unwrap().rows() {
        return Err(lx.err("nonneg flags do not match output size"));
    }
    Ok(Dnn::from_parts(layers, params, const_slot, nonneg))
}

pub fn read_dnn(r: impl BufRead) -> Result<Dnn> {
    let mut lx = Lines { inner: r, line: 0, buf: String::new() };
    read_dnn_inner(&mut lx)
}

pub fn read_deep_rnn(r: impl BufRead) -> Result<DeepRnn> {
    let mut lx = Lines { inner: r, line: 0, buf: String::new() };
    let h = lx.expect("stages", 2)?;
    let k: usize = lx.num(&h[1])?;
    let mut stages = Vec::with_capacity(k);
    let mut wiring = Vec::with_capacity(k);
    for _ in 0..k {
        let t = lx.expect("stage", 8)?;
        wiring.push(match t[3].as_str() {
            "plain" => Wiring::Plain,
            "init_with_last" => Wiring::InitWithLast,
            other => return Err(lx.err(format!("unknown wiring `{other}`"))),
        });
        let s: usize = lx.num(&t[5])?;
        let so: usize = lx.num(&t[7])?;
        let dnn = read_dnn_inner(&mut lx)?;
        let st = BasicRnn::new(dnn, s)?;
        if st.output_size() != so {
            return Err(lx.err("stage output size mismatch"));
        }
        stages.push(st);
    }
    DeepRnn::new(stages, wiring)
}
