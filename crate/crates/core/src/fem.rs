//! Lowest-order Galerkin discretization of −Δu = f with u = 0 on the boundary,
//! a Jacobi-preconditioned conjugate gradient solver, and the residual
//! error estimator.

use crate::error::{Error, Result};
use crate::mesh::{diam_euclid, diam_inf, Mesh, Point};

/// Right-hand side, constant on each element of the initial mesh and inherited
/// by its descendants.
#[derive(Clone, Debug, PartialEq)]
pub enum Source {
    Constant(f64),
    PerRoot(Vec<f64>),
}

impl Source {
    pub fn on(&self, mesh: &Mesh, eid: usize) -> f64 {
        match self {
            Source::Constant(v) => *v,
            Source::PerRoot(v) => v[mesh.elements()[eid].lineage.root as usize],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteSolution {
    pub coefficients: Vec<f64>,
    pub mesh_generation: u64,
}

impl DiscreteSolution {
    pub fn zero(mesh: &Mesh) -> DiscreteSolution {
        DiscreteSolution { coefficients: vec![0.0; mesh.n_vertices()], mesh_generation: mesh.generation() }
    }

    fn check(&self, mesh: &Mesh) -> Result<()> {
        if self.mesh_generation != mesh.generation() || self.coefficients.len() != mesh.n_vertices() {
            return Err(Error::Contract(format!(
                "solution of generation {} with {} coefficients used on mesh generation {} with {} vertices",
                self.mesh_generation,
                self.coefficients.len(),
                mesh.generation(),
                mesh.n_vertices()
            )));
        }
        Ok(())
    }
}

/// Stiffness matrix on the free vertices in compressed rows, plus load vector.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseSystem {
    /// Free-vertex index of each mesh vertex.
    pub dof: Vec<Option<usize>>,
    pub row_ptr: Vec<usize>,
    pub cols: Vec<usize>,
    pub vals: Vec<f64>,
    pub rhs: Vec<f64>,
}

impl SparseSystem {
    pub fn n(&self) -> usize {
        self.rhs.len()
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n()).flat_map(move |r| (self.row_ptr[r]..self.row_ptr[r + 1]).map(move |k| (r, self.cols[k], self.vals[k])))
    }

    pub fn mul(&self, x: &[f64], y: &mut [f64]) {
        for (r, yr) in y.iter_mut().enumerate() {
            let mut acc = 0.0;
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.vals[k] * x[self.cols[k]];
            }
            *yr = acc;
        }
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.n()]; self.n()];
        for (r, c, v) in self.triplets() {
            d[r][c] += v;
        }
        d
    }
}

/// Gradients of the three nodal basis functions and the area.
pub fn basis_gradients(p: &[Point; 3]) -> Result<([[f64; 2]; 3], f64)> {
    let area = 0.5 * ((p[1][0] - p[0][0]) * (p[2][1] - p[0][1]) - (p[2][0] - p[0][0]) * (p[1][1] - p[0][1]));
    if !(area > 0.0) {
        return Err(Error::Geometry(format!("element with area {area}")));
    }
    let mut g = [[0.0; 2]; 3];
    for i in 0..3 {
        let (j, k) = ((i + 1) % 3, (i + 2) % 3);
        g[i] = [(p[j][1] - p[k][1]) / (2.0 * area), (p[k][0] - p[j][0]) / (2.0 * area)];
    }
    Ok((g, area))
}

fn local_stiffness(p: &[Point; 3]) -> Result<([[f64; 3]; 3], f64)> {
    let (g, area) = basis_gradients(p)?;
    let mut k = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            k[i][j] = area * (g[i][0] * g[j][0] + g[i][1] * g[j][1]);
        }
    }
    Ok((k, area))
}

pub fn assemble(mesh: &Mesh, f: &Source) -> Result<SparseSystem> {
    let on_bdry = mesh.boundary_vertices();
    let mut dof = vec![None; mesh.n_vertices()];
    let mut n = 0;
    for (v, b) in on_bdry.iter().enumerate() {
        if !b {
            dof[v] = Some(n);
            n += 1;
        }
    }
    let mut trip: Vec<(usize, usize, f64)> = Vec::with_capacity(9 * mesh.n_elements());
    let mut rhs = vec![0.0; n];
    for (t, e) in mesh.elements().iter().enumerate() {
        let (k, area) = local_stiffness(&mesh.coords(t))?;
        let load = f.on(mesh, t) * area / 3.0;
        for i in 0..3 {
            let Some(r) = dof[e.vertices[i]] else { continue };
            rhs[r] += load;
            for j in 0..3 {
                if let Some(c) = dof[e.vertices[j]] {
                    trip.push((r, c, k[i][j]));
                }
            }
        }
    }
    trip.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
    let mut row_ptr = vec![0; n + 1];
    let mut cols = Vec::with_capacity(trip.len() / 2);
    let mut vals: Vec<f64> = Vec::with_capacity(trip.len() / 2);
    let mut last = None;
    for (r, c, v) in trip {
        if last == Some((r, c)) {
            *vals.last_mut().unwrap() += v;
        } else {
            cols.push(c);
            vals.push(v);
            row_ptr[r + 1] += 1;
            last = Some((r, c));
        }
    }
    for r in 0..n {
        row_ptr[r + 1] += row_ptr[r];
    }
    Ok(SparseSystem { dof, row_ptr, cols, vals, rhs })
}

/// Jacobi-preconditioned conjugate gradients on the free unknowns.
pub fn solve(sys: &SparseSystem, rel_tol: f64) -> Result<Vec<f64>> {
    let n = sys.n();
    let mut x = vec![0.0; n];
    let bnorm = sys.rhs.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n == 0 || bnorm == 0.0 {
        return Ok(x);
    }
    let mut diag = vec![0.0; n];
    for (r, c, v) in sys.triplets() {
        if r == c {
            diag[r] += v;
        }
    }
    if diag.iter().any(|d| !(*d > 0.0)) {
        return Err(Error::Numerical("stiffness matrix has a nonpositive diagonal entry".into()));
    }
    let mut r = sys.rhs.clone();
    let mut z: Vec<f64> = r.iter().zip(&diag).map(|(a, d)| a / d).collect();
    let mut p = z.clone();
    let mut q = vec![0.0; n];
    let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
    let cap = (10 * n).max(1000);
    let mut res = 1.0;
    for it in 0..cap {
        sys.mul(&p, &mut q);
        let pq: f64 = p.iter().zip(&q).map(|(a, b)| a * b).sum();
        let alpha = rz / pq;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * q[i];
        }
        res = r.iter().map(|v| v * v).sum::<f64>().sqrt() / bnorm;
        if !res.is_finite() {
            return Err(Error::Solver { iterations: it + 1, residual: res });
        }
        if res <= rel_tol {
            return Ok(x);
        }
        for i in 0..n {
            z[i] = r[i] / diag[i];
        }
        let rz_new: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(Error::Solver { iterations: cap, residual: res })
}

/// Assembles and solves, returning nodal values on all vertices.
pub fn solve_poisson(mesh: &Mesh, f: &Source, rel_tol: f64) -> Result<DiscreteSolution> {
    let sys = assemble(mesh, f)?;
    let x = solve(&sys, rel_tol)?;
    let coefficients = sys.dof.iter().map(|d| d.map_or(0.0, |i| x[i])).collect();
    Ok(DiscreteSolution { coefficients, mesh_generation: mesh.generation() })
}

/// Constant gradient of U on each element.
pub fn gradients(mesh: &Mesh, u: &DiscreteSolution) -> Result<Vec<[f64; 2]>> {
    u.check(mesh)?;
    let mut out = Vec::with_capacity(mesh.n_elements());
    for (t, e) in mesh.elements().iter().enumerate() {
        let (g, _) = basis_gradients(&mesh.coords(t))?;
        let mut d = [0.0; 2];
        for i in 0..3 {
            let c = u.coefficients[e.vertices[i]];
            d[0] += c * g[i][0];
            d[1] += c * g[i][1];
        }
        out.push(d);
    }
    Ok(out)
}

/// ∫_D |∇U|².
pub fn energy_norm_sq(mesh: &Mesh, u: &DiscreteSolution) -> Result<f64> {
    let g = gradients(mesh, u)?;
    Ok(g.iter().enumerate().map(|(t, d)| mesh.area(t) * (d[0] * d[0] + d[1] * d[1])).sum())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum EstimatorForm {
    /// Euclidean diameter h: h²‖f‖²_T + h‖[∂ₙU]‖²_{∂T∩D}.
    #[default]
    Classic,
    /// ∞-diameter D: D⁴|T|⁻¹‖f‖²_T + D²|∂T|⁻¹‖[∇U]‖²_{∂T∩D}.
    DiamInf,
}

impl std::str::FromStr for EstimatorForm {
    type Err = Error;
    fn from_str(s: &str) -> Result<EstimatorForm> {
        match s {
            "classic" | "euclid" => Ok(EstimatorForm::Classic),
            "diam_inf" | "inf" => Ok(EstimatorForm::DiamInf),
            _ => Err(Error::Validation(format!("unknown estimator form `{s}`"))),
        }
    }
}

/// Squared element indicators ρ_T².
pub fn residual_estimator(mesh: &Mesh, u: &DiscreteSolution, f: &Source, form: EstimatorForm) -> Result<Vec<f64>> {
    let g = gradients(mesh, u)?;
    let nb = mesh.neighbors();
    let mut out = Vec::with_capacity(mesh.n_elements());
    for t in 0..mesh.n_elements() {
        let p = mesh.coords(t);
        let area = mesh.area(t);
        let fv = f.on(mesh, t);
        let mut jump = 0.0;
        let mut perimeter = 0.0;
        for j in 0..3 {
            let (a, b) = (p[(j + 1) % 3], p[(j + 2) % 3]);
            let len = (a[0] - b[0]).hypot(a[1] - b[1]);
            perimeter += len;
            if let Some(o) = nb[t][j] {
                let d = [g[t][0] - g[o][0], g[t][1] - g[o][1]];
                jump += len * (d[0] * d[0] + d[1] * d[1]);
            }
        }
        out.push(match form {
            EstimatorForm::Classic => {
                let h = diam_euclid(&p);
                h * h * fv * fv * area + h * jump
            }
            EstimatorForm::DiamInf => {
                let d = diam_inf(&p);
                let d2 = d * d;
                d2 * d2 * fv * fv + d2 * jump / perimeter
            }
        });
    }
    Ok(out)
}
