//! Conforming triangulations refined by newest-vertex bisection.
//!
//! Elements store their newest vertex first, so the refinement edge of
//! `[v0, v1, v2]` is `(v1, v2)`. Bisecting it at the midpoint `m` yields the
//! children `[m, v0, v1]` and `[m, v2, v0]`.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::io::BufRead;

use crate::error::{Error, Result};

pub type Point = [f64; 2];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Domain {
    UnitSquare,
    LShape,
    ZShape,
}

impl std::str::FromStr for Domain {
    type Err = Error;
    fn from_str(s: &str) -> Result<Domain> {
        match s {
            "unit_square" | "square" => Ok(Domain::UnitSquare),
            "l_shape" | "lshape" => Ok(Domain::LShape),
            "z_shape" | "zshape" => Ok(Domain::ZShape),
            _ => Err(Error::Validation(format!("unknown domain `{s}`"))),
        }
    }
}

impl Domain {
    pub fn name(self) -> &'static str {
        match self {
            Domain::UnitSquare => "unit_square",
            Domain::LShape => "l_shape",
            Domain::ZShape => "z_shape",
        }
    }
}

/// Position of an element in the binary refinement forest over the initial mesh.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Lineage {
    pub root: u32,
    pub level: u32,
    /// Child choices from the root, bit `j` for generation `j + 1`.
    pub path: u128,
}

impl Lineage {
    pub fn root(root: u32) -> Lineage {
        Lineage { root, level: 0, path: 0 }
    }

    pub fn child(self, which: u8) -> Lineage {
        assert!(self.level < 128, "refinement depth exceeds lineage capacity");
        Lineage { root: self.root, level: self.level + 1, path: self.path | (u128::from(which) << self.level) }
    }

    /// Whether `self` equals `other` or lies above it in the forest.
    pub fn is_ancestor_of(self, other: Lineage) -> bool {
        if self.root != other.root || self.level > other.level {
            return false;
        }
        let mask = if self.level == 0 { 0 } else { u128::MAX >> (128 - self.level) };
        other.path & mask == self.path
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Element {
    pub vertices: [usize; 3],
    pub level: u32,
    /// Index, in the mesh this one was refined from, of the element it descends from.
    pub parent: Option<usize>,
    pub lineage: Lineage,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mesh {
    vertices: Vec<Point>,
    elements: Vec<Element>,
    boundary: BTreeSet<(usize, usize)>,
    generation: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Geometry {
    pub area: f64,
    pub diam_inf: f64,
    pub perimeter: f64,
    pub coords: [Point; 3],
}

fn edge(a: usize, b: usize) -> (usize, usize) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

fn signed_area(p: &[Point; 3]) -> f64 {
    0.5 * ((p[1][0] - p[0][0]) * (p[2][1] - p[0][1]) - (p[2][0] - p[0][0]) * (p[1][1] - p[0][1]))
}

/// ∞-norm diameter of a triangle.
pub fn diam_inf(p: &[Point; 3]) -> f64 {
    let mut d: f64 = 0.0;
    for (i, j) in [(0, 1), (1, 2), (2, 0)] {
        d = d.max((p[i][0] - p[j][0]).abs()).max((p[i][1] - p[j][1]).abs());
    }
    d
}

/// Euclidean diameter (longest edge) of a triangle.
pub fn diam_euclid(p: &[Point; 3]) -> f64 {
    let mut d: f64 = 0.0;
    for (i, j) in [(0, 1), (1, 2), (2, 0)] {
        d = d.max((p[i][0] - p[j][0]).hypot(p[i][1] - p[j][1]));
    }
    d
}

impl Mesh {
    /// Builds a mesh from raw data; the boundary is the set of edges owned by a
    /// single element.
    pub fn new(vertices: Vec<Point>, tris: Vec<[usize; 3]>) -> Result<Mesh> {
        let elements = tris
            .into_iter()
            .enumerate()
            .map(|(i, v)| Element { vertices: v, level: 0, parent: None, lineage: Lineage::root(i as u32) })
            .collect();
        Mesh::with_elements(vertices, elements)
    }

    fn with_elements(vertices: Vec<Point>, elements: Vec<Element>) -> Result<Mesh> {
        for (i, p) in vertices.iter().enumerate() {
            if !p[0].is_finite() || !p[1].is_finite() {
                return Err(Error::Validation(format!("vertex {i} has non-finite coordinates")));
            }
        }
        let mut count: HashMap<(usize, usize), u32> = HashMap::new();
        for (k, e) in elements.iter().enumerate() {
            let v = e.vertices;
            if v.iter().any(|&i| i >= vertices.len()) || v[0] == v[1] || v[1] == v[2] || v[0] == v[2] {
                return Err(Error::Validation(format!("element {k} has invalid vertex ids")));
            }
            let a = signed_area(&[vertices[v[0]], vertices[v[1]], vertices[v[2]]]);
            if !(a > 0.0) {
                return Err(Error::Geometry(format!("element {k} has nonpositive area {a}")));
            }
            for (i, j) in [(0, 1), (1, 2), (2, 0)] {
                *count.entry(edge(v[i], v[j])).or_default() += 1;
            }
        }
        if let Some((e, c)) = count.iter().find(|(_, &c)| c > 2) {
            return Err(Error::Validation(format!("edge {e:?} shared by {c} elements")));
        }
        let boundary = count.into_iter().filter(|(_, c)| *c == 1).map(|(e, _)| e).collect();
        Ok(Mesh { vertices, elements, boundary, generation: 0 })
    }

    pub fn initial(domain: Domain) -> Mesh {
        let (v, t): (Vec<Point>, Vec<[usize; 3]>) = match domain {
            Domain::UnitSquare => (vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]], vec![[1, 2, 0], [3, 0, 2]]),
            Domain::LShape => (
                vec![
                    [-1.0, -1.0],
                    [0.0, -1.0],
                    [-1.0, 0.0],
                    [0.0, 0.0],
                    [1.0, 0.0],
                    [-1.0, 1.0],
                    [0.0, 1.0],
                    [1.0, 1.0],
                ],
                vec![[1, 3, 0], [2, 0, 3], [2, 3, 5], [6, 5, 3], [4, 7, 3], [6, 3, 7]],
            ),
            Domain::ZShape => (
                vec![
                    [-1.0, -1.0],
                    [0.0, -1.0],
                    [1.0, -1.0],
                    [1.0, 0.0],
                    [1.0, 1.0],
                    [0.0, 1.0],
                    [-1.0, 1.0],
                    [-1.0, 0.0],
                    [0.0, 0.0],
                    [-1.0, -0.2],
                ],
                vec![[7, 8, 6], [5, 6, 8], [3, 4, 8], [5, 8, 4], [1, 2, 8], [3, 8, 2], [9, 0, 8], [1, 8, 0]],
            ),
        };
        Mesh::new(v, t).expect("built-in meshes are valid")
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn elements(&self) -> &[Element] {
        &self.elements
    }

    pub fn n_elements(&self) -> usize {
        self.elements.len()
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn boundary_edges(&self) -> &BTreeSet<(usize, usize)> {
        &self.boundary
    }

    pub fn is_boundary_edge(&self, a: usize, b: usize) -> bool {
        self.boundary.contains(&edge(a, b))
    }

    /// Vertices lying on the domain boundary.
    pub fn boundary_vertices(&self) -> Vec<bool> {
        let mut on = vec![false; self.vertices.len()];
        for &(a, b) in &self.boundary {
            on[a] = true;
            on[b] = true;
        }
        on
    }

    pub fn coords(&self, eid: usize) -> [Point; 3] {
        let v = self.elements[eid].vertices;
        [self.vertices[v[0]], self.vertices[v[1]], self.vertices[v[2]]]
    }

    fn check_id(&self, eid: usize) -> Result<()> {
        if eid >= self.elements.len() {
            return Err(Error::Validation(format!("element id {eid} out of range ({} elements)", self.elements.len())));
        }
        Ok(())
    }

    pub fn geometry(&self, eid: usize) -> Result<Geometry> {
        self.check_id(eid)?;
        let p = self.coords(eid);
        let perimeter = (0..3).map(|i| {
            let (a, b) = (p[i], p[(i + 1) % 3]);
            (a[0] - b[0]).hypot(a[1] - b[1])
        });
        Ok(Geometry { area: signed_area(&p), diam_inf: diam_inf(&p), perimeter: perimeter.sum(), coords: p })
    }

    pub fn area(&self, eid: usize) -> f64 {
        signed_area(&self.coords(eid))
    }

    /// `n[e][j]` is the element across the edge opposite local vertex `j`.
    pub fn neighbors(&self) -> Vec<[Option<usize>; 3]> {
        let mut owner: HashMap<(usize, usize), usize> = HashMap::with_capacity(self.elements.len() * 2);
        let mut n = vec![[None; 3]; self.elements.len()];
        for (k, e) in self.elements.iter().enumerate() {
            let v = e.vertices;
            for j in 0..3 {
                let key = edge(v[(j + 1) % 3], v[(j + 2) % 3]);
                if let Some(o) = owner.remove(&key) {
                    n[k][j] = Some(o);
                    let w = self.elements[o].vertices;
                    let jj = (0..3).find(|&i| edge(w[(i + 1) % 3], w[(i + 2) % 3]) == key).unwrap();
                    n[o][jj] = Some(k);
                } else {
                    owner.insert(key, k);
                }
            }
        }
        n
    }

    /// The element together with its edge neighbours.
    pub fn patch(&self, eid: usize) -> Result<Vec<usize>> {
        self.check_id(eid)?;
        let v = self.elements[eid].vertices;
        let mut out = vec![eid];
        for j in 0..3 {
            let key = edge(v[(j + 1) % 3], v[(j + 2) % 3]);
            for (k, e) in self.elements.iter().enumerate() {
                if k == eid {
                    continue;
                }
                let w = e.vertices;
                if (0..3).any(|i| edge(w[i], w[(i + 1) % 3]) == key) {
                    out.push(k);
                }
            }
        }
        Ok(out)
    }

    /// Newest-vertex bisection of the marked elements plus the closure needed
    /// to keep the mesh conforming.
    pub fn refine(&self, marked: &[usize]) -> Result<Mesh> {
        for &m in marked {
            self.check_id(m)?;
        }
        if marked.is_empty() {
            return Ok(self.clone());
        }
        let mut owners: HashMap<(usize, usize), [usize; 2]> = HashMap::with_capacity(self.elements.len() * 2);
        for (k, e) in self.elements.iter().enumerate() {
            let v = e.vertices;
            for (i, j) in [(0, 1), (1, 2), (2, 0)] {
                owners.entry(edge(v[i], v[j])).and_modify(|o| o[1] = k).or_insert([k, usize::MAX]);
            }
        }
        let mut split: HashMap<(usize, usize), usize> = HashMap::new();
        let mut stack: Vec<usize> = marked.to_vec();
        while let Some(k) = stack.pop() {
            let v = self.elements[k].vertices;
            let r = edge(v[1], v[2]);
            if split.contains_key(&r) {
                continue;
            }
            split.insert(r, usize::MAX);
            for &o in &owners[&r] {
                if o != usize::MAX && o != k {
                    stack.push(o);
                }
            }
        }
        self.bisect_edges(split)
    }

    /// Every element replaced by its four grandchildren.
    pub fn uniform_refine(&self) -> Mesh {
        let mut split = HashMap::new();
        for e in &self.elements {
            let v = e.vertices;
            for (i, j) in [(0, 1), (1, 2), (2, 0)] {
                split.insert(edge(v[i], v[j]), usize::MAX);
            }
        }
        self.bisect_edges(split).expect("uniform refinement is always compatible")
    }

    fn bisect_edges(&self, mut split: HashMap<(usize, usize), usize>) -> Result<Mesh> {
        let mut vertices = self.vertices.clone();
        let mut elements: Vec<Element> = self.elements.clone();
        let mut boundary = self.boundary.clone();
        let n0 = elements.len();
        let mut work: Vec<Element> = Vec::new();
        for k in 0..n0 {
            let e = &self.elements[k];
            if !split.contains_key(&edge(e.vertices[1], e.vertices[2])) {
                continue;
            }
            let mut first = true;
            work.push(e.clone());
            while let Some(t) = work.pop() {
                let [a, b, c] = t.vertices;
                let key = edge(b, c);
                match split.get(&key).copied() {
                    Some(mid) => {
                        let m = if mid == usize::MAX {
                            let (pb, pc) = (vertices[b], vertices[c]);
                            vertices.push([0.5 * (pb[0] + pc[0]), 0.5 * (pb[1] + pc[1])]);
                            let m = vertices.len() - 1;
                            split.insert(key, m);
                            if boundary.remove(&key) {
                                boundary.insert(edge(b, m));
                                boundary.insert(edge(m, c));
                            }
                            m
                        } else {
                            mid
                        };
                        let mk = |verts: [usize; 3], which: u8| Element {
                            vertices: verts,
                            level: t.level + 1,
                            parent: Some(k),
                            lineage: t.lineage.child(which),
                        };
                        // push second child first so the first child is finished first
                        work.push(mk([m, c, a], 1));
                        work.push(mk([m, a, b], 0));
                    }
                    None => {
                        if first {
                            elements[k] = t;
                            first = false;
                        } else {
                            elements.push(t);
                        }
                    }
                }
            }
        }
        if split.values().any(|&m| m == usize::MAX) {
            return Err(Error::Contract("marked edge left unbisected".into()));
        }
        Ok(Mesh { vertices, elements, boundary, generation: self.generation + 1 })
    }

    /// Checks edge incidences: interior edges have two elements, boundary edges one.
    pub fn check_conforming(&self) -> Result<()> {
        let mut count: HashMap<(usize, usize), u32> = HashMap::new();
        for (k, e) in self.elements.iter().enumerate() {
            let v = e.vertices;
            if !(signed_area(&self.coords(k)) > 0.0) {
                return Err(Error::Geometry(format!("element {k} is not positively oriented")));
            }
            for (i, j) in [(0, 1), (1, 2), (2, 0)] {
                *count.entry(edge(v[i], v[j])).or_default() += 1;
            }
        }
        for (e, c) in &count {
            match c {
                1 if !self.boundary.contains(e) => {
                    return Err(Error::Contract(format!("edge {e:?} has one element but is not on the boundary")))
                }
                2 if self.boundary.contains(e) => {
                    return Err(Error::Contract(format!("boundary edge {e:?} has two elements")))
                }
                1 | 2 => {}
                _ => return Err(Error::Contract(format!("edge {e:?} has {c} elements"))),
            }
        }
        if let Some(e) = self.boundary.iter().find(|e| !count.contains_key(e)) {
            return Err(Error::Contract(format!("boundary edge {e:?} belongs to no element")));
        }
        Ok(())
    }

    /// Smallest interior angle over all elements, in radians.
    pub fn min_angle(&self) -> f64 {
        let mut best = f64::INFINITY;
        for k in 0..self.elements.len() {
            let p = self.coords(k);
            for i in 0..3 {
                let (a, b, c) = (p[i], p[(i + 1) % 3], p[(i + 2) % 3]);
                let u = [b[0] - a[0], b[1] - a[1]];
                let w = [c[0] - a[0], c[1] - a[1]];
                let cos = (u[0] * w[0] + u[1] * w[1]) / (u[0].hypot(u[1]) * w[0].hypot(w[1]));
                best = best.min(cos.clamp(-1.0, 1.0).acos());
            }
        }
        best
    }

    pub fn lineages(&self) -> Vec<Lineage> {
        self.elements.iter().map(|e| e.lineage).collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "vertices {} elements {}", self.vertices.len(), self.elements.len()).unwrap();
        for p in &self.vertices {
            writeln!(s, "{} {}", p[0], p[1]).unwrap();
        }
        for e in &self.elements {
            let v = e.vertices;
            writeln!(s, "{} {} {} {}", v[0], v[1], v[2], e.level).unwrap();
        }
        s
    }

    /// Reads the text format. Refinement history is not stored, so each element
    /// becomes a root of its own.
    pub fn from_text(r: impl BufRead) -> Result<Mesh> {
        let mut lines = r.lines().enumerate();
        let mut next = || -> Result<(usize, String)> {
            loop {
                match lines.next() {
                    Some((i, l)) => {
                        let l = l?;
                        if !l.trim().is_empty() {
                            return Ok((i + 1, l));
                        }
                    }
                    None => return Err(Error::Parse { line: 0, msg: "unexpected end of mesh file".into() }),
                }
            }
        };
        let (ln, head) = next()?;
        let t: Vec<&str> = head.split_whitespace().collect();
        if t.len() != 4 || t[0] != "vertices" || t[2] != "elements" {
            return Err(Error::Parse { line: ln, msg: "expected `vertices N elements M`".into() });
        }
        fn perr<E>(line: usize) -> impl Fn(E) -> Error {
            move |_| Error::Parse { line, msg: "bad number".into() }
        }
        let nv: usize = t[1].parse().map_err(perr(ln))?;
        let ne: usize = t[3].parse().map_err(perr(ln))?;
        let mut vertices = Vec::with_capacity(nv);
        for _ in 0..nv {
            let (ln, l) = next()?;
            let f: Vec<f64> = l.split_whitespace().map(str::parse).collect::<std::result::Result<_, _>>().map_err(perr(ln))?;
            if f.len() != 2 {
                return Err(Error::Parse { line: ln, msg: "vertex needs two coordinates".into() });
            }
            vertices.push([f[0], f[1]]);
        }
        let mut elements = Vec::with_capacity(ne);
        for k in 0..ne {
            let (ln, l) = next()?;
            let f: Vec<usize> = l.split_whitespace().map(str::parse).collect::<std::result::Result<_, _>>().map_err(perr(ln))?;
            if f.len() != 4 {
                return Err(Error::Parse { line: ln, msg: "element needs three vertex ids and a level".into() });
            }
            elements.push(Element {
                vertices: [f[0], f[1], f[2]],
                level: f[3] as u32,
                parent: None,
                lineage: Lineage::root(k as u32),
            });
        }
        Mesh::with_elements(vertices, elements)
    }
}
