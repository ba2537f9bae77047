//! C interface to the adaptnet mesh, solver, estimator and marking routines.
//!
//! Meshes and solutions are opaque heap handles released with the matching
//! `*_free` call. Every fallible function returns an [`AnStatus`] code; the
//! message of the most recent failure on the calling thread is available
//! through [`an_last_error`].

use std::cell::RefCell;
use std::ffi::c_char;
use std::panic::{catch_unwind, AssertUnwindSafe};

use adaptnet::fem::{energy_norm_sq, residual_estimator, solve_poisson, DiscreteSolution, EstimatorForm, Source};
use adaptnet::marking::{doerfler_mark, mark_iterations};
use adaptnet::mesh::{Domain, Mesh};
use adaptnet::rnn_blocks::{build_adaptive_with, encode_inputs, AdaptiveParams, FloatModel, MarkOutputs, Windows};
use adaptnet::Error;

/// Status codes returned by every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnStatus {
    Ok = 0,
    NullPointer = 1,
    Validation = 2,
    Dimension = 3,
    Geometry = 4,
    Solver = 5,
    Numerical = 6,
    Contract = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnDomain {
    UnitSquare = 0,
    LShape = 1,
    ZShape = 2,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnEstimatorForm {
    Classic = 0,
    DiamInf = 1,
}

/// Opaque conforming triangulation.
pub struct AnMesh(Mesh);

/// Opaque discrete solution, valid only for the mesh it was computed on.
pub struct AnSolution(DiscreteSolution);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> AnStatus {
    match e {
        Error::Dimension(_) => AnStatus::Dimension,
        Error::Validation(_) | Error::Parse { .. } | Error::Io(_) => AnStatus::Validation,
        Error::Geometry(_) => AnStatus::Geometry,
        Error::Solver { .. } => AnStatus::Solver,
        Error::Numerical(_) => AnStatus::Numerical,
        Error::Contract(_) => AnStatus::Contract,
    }
}

struct Fail(AnStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Fail {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(body: impl FnOnce() -> Result<(), Fail>) -> AnStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => {
            set_error(String::new());
            AnStatus::Ok
        }
        Ok(Err(Fail(s, msg))) => {
            set_error(msg);
            s
        }
        Err(_) => {
            set_error("panic inside adaptnet".into());
            AnStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(AnStatus::NullPointer, format!("{what} is null"))
}

unsafe fn href<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, need: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if len < need {
        return Err(Fail(AnStatus::BufferTooSmall, format!("{what} holds {len} entries, {need} needed")));
    }
    if need == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, need))
}

unsafe fn put<T>(out: *mut T, v: T, what: &str) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null(what));
    }
    *out = v;
    Ok(())
}

fn form(f: AnEstimatorForm) -> EstimatorForm {
    match f {
        AnEstimatorForm::Classic => EstimatorForm::Classic,
        AnEstimatorForm::DiamInf => EstimatorForm::DiamInf,
    }
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length without the NUL.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn an_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Initial triangulation of one of the built-in domains.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for a handle.
#[no_mangle]
pub unsafe extern "C" fn an_mesh_new(domain: AnDomain, out: *mut *mut AnMesh) -> AnStatus {
    guard(|| {
        let d = match domain {
            AnDomain::UnitSquare => Domain::UnitSquare,
            AnDomain::LShape => Domain::LShape,
            AnDomain::ZShape => Domain::ZShape,
        };
        put(out, Box::into_raw(Box::new(AnMesh(Mesh::initial(d)))), "out")
    })
}

/// Mesh from `n_vertices` coordinate pairs and `n_elements` vertex triples.
///
/// # Safety
/// `xy` must hold `2 * n_vertices` doubles, `tris` `3 * n_elements` indices.
#[no_mangle]
pub unsafe extern "C" fn an_mesh_from_arrays(
    xy: *const f64,
    n_vertices: usize,
    tris: *const usize,
    n_elements: usize,
    out: *mut *mut AnMesh,
) -> AnStatus {
    guard(|| {
        let xy = slice(xy, 2 * n_vertices, "xy")?;
        let tris = slice(tris, 3 * n_elements, "tris")?;
        let m = Mesh::new(xy.chunks(2).map(|c| [c[0], c[1]]).collect(), tris.chunks(3).map(|c| [c[0], c[1], c[2]]).collect())?;
        put(out, Box::into_raw(Box::new(AnMesh(m))), "out")
    })
}

/// # Safety
/// `mesh` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn an_mesh_free(mesh: *mut AnMesh) {
    if !mesh.is_null() {
        drop(Box::from_raw(mesh));
    }
}

/// Number of elements, 0 for a null handle.
///
/// # Safety
/// `mesh` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn an_mesh_n_elements(mesh: *const AnMesh) -> usize {
    mesh.as_ref().map_or(0, |m| m.0.n_elements())
}

/// Number of vertices, 0 for a null handle.
///
/// # Safety
/// `mesh` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn an_mesh_n_vertices(mesh: *const AnMesh) -> usize {
    mesh.as_ref().map_or(0, |m| m.0.n_vertices())
}

/// Writes interleaved vertex coordinates; `len` must be at least `2 * n_vertices`.
///
/// # Safety
/// `mesh` must be a live handle and `xy` point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn an_mesh_vertices(mesh: *const AnMesh, xy: *mut f64, len: usize) -> AnStatus {
    guard(|| {
        let m = &href(mesh, "mesh")?.0;
        let out = slice_mut(xy, len, 2 * m.n_vertices(), "xy")?;
        for (o, p) in out.chunks_mut(2).zip(m.vertices()) {
            o.copy_from_slice(p);
        }
        Ok(())
    })
}

/// Writes vertex triples; `len` must be at least `3 * n_elements`.
///
/// # Safety
/// `mesh` must be a live handle and `tris` point to `len` writable entries.
#[no_mangle]
pub unsafe extern "C" fn an_mesh_elements(mesh: *const AnMesh, tris: *mut usize, len: usize) -> AnStatus {
    guard(|| {
        let m = &href(mesh, "mesh")?.0;
        let out = slice_mut(tris, len, 3 * m.n_elements(), "tris")?;
        for (o, e) in out.chunks_mut(3).zip(m.elements()) {
            o.copy_from_slice(&e.vertices);
        }
        Ok(())
    })
}

/// Refines the marked elements plus the closure; the input mesh is untouched.
///
/// # Safety
/// `mesh` must be a live handle, `marked` hold `n_marked` indices.
#[no_mangle]
pub unsafe extern "C" fn an_mesh_refine(
    mesh: *const AnMesh,
    marked: *const usize,
    n_marked: usize,
    out: *mut *mut AnMesh,
) -> AnStatus {
    guard(|| {
        let m = &href(mesh, "mesh")?.0;
        let r = m.refine(slice(marked, n_marked, "marked")?)?;
        put(out, Box::into_raw(Box::new(AnMesh(r))), "out")
    })
}

/// One red refinement of every element.
///
/// # Safety
/// `mesh` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn an_mesh_uniform_refine(mesh: *const AnMesh, out: *mut *mut AnMesh) -> AnStatus {
    guard(|| {
        let m = &href(mesh, "mesh")?.0;
        put(out, Box::into_raw(Box::new(AnMesh(m.uniform_refine()))), "out")
    })
}

/// Galerkin solution for the constant source `f`.
///
/// # Safety
/// `mesh` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn an_solve(mesh: *const AnMesh, f: f64, rel_tol: f64, out: *mut *mut AnSolution) -> AnStatus {
    guard(|| {
        let m = &href(mesh, "mesh")?.0;
        let u = solve_poisson(m, &Source::Constant(f), rel_tol)?;
        put(out, Box::into_raw(Box::new(AnSolution(u))), "out")
    })
}

/// # Safety
/// `sol` must be null or a live solution handle.
#[no_mangle]
pub unsafe extern "C" fn an_solution_free(sol: *mut AnSolution) {
    if !sol.is_null() {
        drop(Box::from_raw(sol));
    }
}

/// Nodal coefficients; `len` must be at least the vertex count of the mesh.
///
/// # Safety
/// `sol` must be a live handle and `coef` point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn an_solution_coefficients(sol: *const AnSolution, coef: *mut f64, len: usize) -> AnStatus {
    guard(|| {
        let u = &href(sol, "sol")?.0;
        slice_mut(coef, len, u.coefficients.len(), "coef")?.copy_from_slice(&u.coefficients);
        Ok(())
    })
}

/// Squared energy norm of the solution.
///
/// # Safety
/// `mesh` and `sol` must be live handles.
#[no_mangle]
pub unsafe extern "C" fn an_energy_sq(mesh: *const AnMesh, sol: *const AnSolution, out: *mut f64) -> AnStatus {
    guard(|| {
        let e = energy_norm_sq(&href(mesh, "mesh")?.0, &href(sol, "sol")?.0)?;
        put(out, e, "out")
    })
}

/// Squared element indicators for the constant source `f`.
///
/// # Safety
/// `mesh` and `sol` must be live handles, `rho2` point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn an_estimator(
    mesh: *const AnMesh,
    sol: *const AnSolution,
    f: f64,
    estimator_form: AnEstimatorForm,
    rho2: *mut f64,
    len: usize,
) -> AnStatus {
    guard(|| {
        let m = &href(mesh, "mesh")?.0;
        let r = residual_estimator(m, &href(sol, "sol")?.0, &Source::Constant(f), form(estimator_form))?;
        slice_mut(rho2, len, r.len(), "rho2")?.copy_from_slice(&r);
        Ok(())
    })
}

fn write_flags(idx: &[usize], flags: &mut [u8], count: *mut usize) -> Result<(), Fail> {
    flags.fill(0);
    for &i in idx {
        flags[i] = 1;
    }
    if !count.is_null() {
        unsafe { *count = idx.len() };
    }
    Ok(())
}

/// Minimal Dörfler set of `values` for bulk parameter `theta`, as 0/1 flags.
/// `count` may be null.
///
/// # Safety
/// `values` must hold `n` doubles and `flags` `n` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn an_doerfler_mark(
    values: *const f64,
    n: usize,
    theta: f64,
    flags: *mut u8,
    count: *mut usize,
) -> AnStatus {
    guard(|| {
        let v = slice(values, n, "values")?;
        let flags = slice_mut(flags, n, n, "flags")?;
        let m = doerfler_mark(v, theta)?;
        write_flags(&m.indices, flags, count)
    })
}

/// Marks through the explicit estimate-and-mark network on the current
/// solution, as 0/1 flags over the elements. An empty set means the
/// network's stopping test `Σρ² ≤ eps_tol²` fired. `count` may be null.
///
/// # Safety
/// `mesh` and `sol` must be live handles, `flags` point to `len` writable bytes.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn an_rnn_mark(
    mesh: *const AnMesh,
    sol: *const AnSolution,
    f: f64,
    theta: f64,
    eps: f64,
    eps_tol: f64,
    flags: *mut u8,
    len: usize,
    count: *mut usize,
) -> AnStatus {
    guard(|| {
        let m = &href(mesh, "mesh")?.0;
        let u = &href(sol, "sol")?.0;
        let n = m.n_elements();
        let flags = slice_mut(flags, len, n, "flags")?;
        let recs = encode_inputs(m, u, &Source::Constant(f))?;
        let p = AdaptiveParams {
            theta,
            eps,
            eps_tol,
            n: AdaptiveParams::accuracy_for(n, eps),
            k: mark_iterations(1e3, n, eps),
        };
        let net = build_adaptive_with(&p, Windows::fit(&recs), FloatModel::default())?;
        let flat: Vec<f64> = recs.iter().flatten().copied().collect();
        let out = net.eval_flat(&flat, n);
        let so = net.output_size();
        let idx: Vec<usize> = (0..n).filter(|&i| out[i * so + MarkOutputs::MARK] > 0.0).collect();
        write_flags(&idx, flags, count)
    })
}
