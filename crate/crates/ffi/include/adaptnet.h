#ifndef ADAPTNET_H
#define ADAPTNET_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum AnDomain {
  AN_DOMAIN_UNIT_SQUARE = 0,
  AN_DOMAIN_L_SHAPE = 1,
  AN_DOMAIN_Z_SHAPE = 2,
} AnDomain;

typedef enum AnEstimatorForm {
  AN_ESTIMATOR_FORM_CLASSIC = 0,
  AN_ESTIMATOR_FORM_DIAM_INF = 1,
} AnEstimatorForm;

/**
 * Status codes returned by every fallible call.
 */
typedef enum AnStatus {
  AN_STATUS_OK = 0,
  AN_STATUS_NULL_POINTER = 1,
  AN_STATUS_VALIDATION = 2,
  AN_STATUS_DIMENSION = 3,
  AN_STATUS_GEOMETRY = 4,
  AN_STATUS_SOLVER = 5,
  AN_STATUS_NUMERICAL = 6,
  AN_STATUS_CONTRACT = 7,
  AN_STATUS_BUFFER_TOO_SMALL = 8,
  AN_STATUS_PANIC = 9,
} AnStatus;

/**
 * Opaque conforming triangulation.
 */
typedef struct AnMesh AnMesh;

/**
 * Opaque discrete solution, valid only for the mesh it was computed on.
 */
typedef struct AnSolution AnSolution;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message of this thread into `buf` (NUL-terminated,
 * truncated to `len`). Returns the full message length without the NUL.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t an_last_error(char *buf, size_t len);

/**
 * Initial triangulation of one of the built-in domains.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for a handle.
 */
enum AnStatus an_mesh_new(enum AnDomain domain, struct AnMesh **out);

/**
 * Mesh from `n_vertices` coordinate pairs and `n_elements` vertex triples.
 *
 * # Safety
 * `xy` must hold `2 * n_vertices` doubles, `tris` `3 * n_elements` indices.
 */
enum AnStatus an_mesh_from_arrays(const double *xy,
                                  size_t n_vertices,
                                  const size_t *tris,
                                  size_t n_elements,
                                  struct AnMesh **out);

/**
 * # Safety
 * `mesh` must be null or a handle from this library not yet freed.
 */
void an_mesh_free(struct AnMesh *mesh);

/**
 * Number of elements, 0 for a null handle.
 *
 * # Safety
 * `mesh` must be null or a live handle.
 */
size_t an_mesh_n_elements(const struct AnMesh *mesh);

/**
 * Number of vertices, 0 for a null handle.
 *
 * # Safety
 * `mesh` must be null or a live handle.
 */
size_t an_mesh_n_vertices(const struct AnMesh *mesh);

/**
 * Writes interleaved vertex coordinates; `len` must be at least `2 * n_vertices`.
 *
 * # Safety
 * `mesh` must be a live handle and `xy` point to `len` writable doubles.
 */
enum AnStatus an_mesh_vertices(const struct AnMesh *mesh, double *xy, size_t len);

/**
 * Writes vertex triples; `len` must be at least `3 * n_elements`.
 *
 * # Safety
 * `mesh` must be a live handle and `tris` point to `len` writable entries.
 */
enum AnStatus an_mesh_elements(const struct AnMesh *mesh, size_t *tris, size_t len);

/**
 * Refines the marked elements plus the closure; the input mesh is untouched.
 *
 * # Safety
 * `mesh` must be a live handle, `marked` hold `n_marked` indices.
 */
enum AnStatus an_mesh_refine(const struct AnMesh *mesh,
                             const size_t *marked,
                             size_t n_marked,
                             struct AnMesh **out);

/**
 * One red refinement of every element.
 *
 * # Safety
 * `mesh` must be a live handle.
 */
enum AnStatus an_mesh_uniform_refine(const struct AnMesh *mesh, struct AnMesh **out);

/**
 * Galerkin solution for the constant source `f`.
 *
 * # Safety
 * `mesh` must be a live handle.
 */
enum AnStatus an_solve(const struct AnMesh *mesh,
                       double f,
                       double rel_tol,
                       struct AnSolution **out);

/**
 * # Safety
 * `sol` must be null or a live solution handle.
 */
void an_solution_free(struct AnSolution *sol);

/**
 * Nodal coefficients; `len` must be at least the vertex count of the mesh.
 *
 * # Safety
 * `sol` must be a live handle and `coef` point to `len` writable doubles.
 */
enum AnStatus an_solution_coefficients(const struct AnSolution *sol, double *coef, size_t len);

/**
 * Squared energy norm of the solution.
 *
 * # Safety
 * `mesh` and `sol` must be live handles.
 */
enum AnStatus an_energy_sq(const struct AnMesh *mesh, const struct AnSolution *sol, double *out);

/**
 * Squared element indicators for the constant source `f`.
 *
 * # Safety
 * `mesh` and `sol` must be live handles, `rho2` point to `len` writable doubles.
 */
enum AnStatus an_estimator(const struct AnMesh *mesh,
                           const struct AnSolution *sol,
                           double f,
                           enum AnEstimatorForm estimator_form,
                           double *rho2,
                           size_t len);

/**
 * Minimal Dörfler set of `values` for bulk parameter `theta`, as 0/1 flags.
 * `count` may be null.
 *
 * # Safety
 * `values` must hold `n` doubles and `flags` `n` writable bytes.
 */
enum AnStatus an_doerfler_mark(const double *values,
                               size_t n,
                               double theta,
                               uint8_t *flags,
                               size_t *count);

/**
 * Marks through the explicit estimate-and-mark network on the current
 * solution, as 0/1 flags over the elements. An empty set means the
 * network's stopping test `Σρ² ≤ eps_tol²` fired. `count` may be null.
 *
 * # Safety
 * `mesh` and `sol` must be live handles, `flags` point to `len` writable bytes.
 */
enum AnStatus an_rnn_mark(const struct AnMesh *mesh,
                          const struct AnSolution *sol,
                          double f,
                          double theta,
                          double eps,
                          double eps_tol,
                          uint8_t *flags,
                          size_t len,
                          size_t *count);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* ADAPTNET_H */
