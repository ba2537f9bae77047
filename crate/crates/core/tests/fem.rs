use adaptnet::fem::{self, DiscreteSolution, EstimatorForm, Source};
use adaptnet::mesh::{Domain, Mesh};
use approx::assert_relative_eq;

fn dense_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for k in 0..n {
        let p = (k..n).max_by(|&i, &j| a[i][k].abs().total_cmp(&a[j][k].abs())).unwrap();
        a.swap(k, p);
        b.swap(k, p);
        for i in k + 1..n {
            let l = a[i][k] / a[k][k];
            for j in k..n {
                a[i][j] -= l * a[k][j];
            }
            b[i] -= l * b[k];
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|j| a[i][j] * x[j]).sum();
        x[i] = (b[i] - s) / a[i][i];
    }
    x
}

fn criss_cross() -> Mesh {
    Mesh::initial(Domain::UnitSquare).uniform_refine()
}

fn center(m: &Mesh) -> usize {
    m.vertices().iter().position(|p| *p == [0.5, 0.5]).unwrap()
}

#[test]
fn zero_source_gives_zero_load_and_solution() {
    let m = Mesh::initial(Domain::LShape).uniform_refine();
    let sys = fem::assemble(&m, &Source::Constant(0.0)).unwrap();
    assert!(sys.rhs.iter().all(|&v| v == 0.0));
    let u = fem::solve_poisson(&m, &Source::Constant(0.0), 1e-10).unwrap();
    assert!(u.coefficients.iter().all(|&v| v == 0.0));
}

#[test]
fn criss_cross_stiffness_and_hat_energy() {
    let m = criss_cross();
    let sys = fem::assemble(&m, &Source::Constant(1.0)).unwrap();
    assert_eq!(sys.n(), 1);
    assert_relative_eq!(sys.to_dense()[0][0], 4.0, epsilon = 1e-14);
    let mut hat = DiscreteSolution::zero(&m);
    hat.coefficients[center(&m)] = 1.0;
    assert_relative_eq!(fem::energy_norm_sq(&m, &hat).unwrap(), 4.0, epsilon = 1e-14);
    assert_eq!(fem::energy_norm_sq(&m, &DiscreteSolution::zero(&m)).unwrap(), 0.0);
}

#[test]
fn one_unknown_solve_and_dense_oracle() {
    let m = criss_cross();
    let sys = fem::assemble(&m, &Source::Constant(1.0)).unwrap();
    let x = fem::solve(&sys, 1e-10).unwrap();
    assert_relative_eq!(x[0], sys.rhs[0] / sys.to_dense()[0][0], epsilon = 1e-15);

    let m = criss_cross().uniform_refine();
    let sys = fem::assemble(&m, &Source::Constant(1.0)).unwrap();
    let x = fem::solve(&sys, 1e-14).unwrap();
    let y = dense_solve(sys.to_dense(), sys.rhs.clone());
    for (a, b) in x.iter().zip(&y) {
        assert!((a - b).abs() <= 1e-12);
    }
}

#[test]
fn stiffness_is_symmetric_with_zero_interior_row_sums() {
    let m = criss_cross().uniform_refine();
    let sys = fem::assemble(&m, &Source::Constant(1.0)).unwrap();
    let d = sys.to_dense();
    for i in 0..sys.n() {
        assert!(d[i][i] > 0.0);
        for j in 0..sys.n() {
            assert_eq!(d[i][j], d[j][i]);
        }
    }
    // the centre vertex has no boundary neighbours
    let c = sys.dof[center(&m)].unwrap();
    let s: f64 = d[c].iter().sum();
    assert!(s.abs() < 1e-14);
}

#[test]
fn energy_grows_along_nested_meshes() {
    let f = Source::Constant(1.0);
    let mut m = Mesh::initial(Domain::LShape);
    let mut last = 0.0;
    for k in 0..6 {
        let u = fem::solve_poisson(&m, &f, 1e-12).unwrap();
        let e = fem::energy_norm_sq(&m, &u).unwrap();
        assert!(e >= last - 1e-10);
        last = e;
        m = m.refine(&[k % m.n_elements(), m.n_elements() - 1]).unwrap();
    }
}

#[test]
fn generation_mismatch_is_a_contract_error() {
    let m = Mesh::initial(Domain::LShape);
    let u = fem::solve_poisson(&m, &Source::Constant(1.0), 1e-10).unwrap();
    let r = m.refine(&[0]).unwrap();
    assert!(fem::energy_norm_sq(&r, &u).is_err());
    assert!(fem::residual_estimator(&r, &u, &Source::Constant(1.0), EstimatorForm::Classic).is_err());
}

#[test]
fn estimator_examples() {
    let m = Mesh::initial(Domain::LShape).uniform_refine();
    let zero = DiscreteSolution::zero(&m);
    for form in [EstimatorForm::Classic, EstimatorForm::DiamInf] {
        let e = fem::residual_estimator(&m, &zero, &Source::Constant(0.0), form).unwrap();
        assert!(e.iter().all(|&v| v == 0.0));
    }
    let e = fem::residual_estimator(&m, &zero, &Source::Constant(1.0), EstimatorForm::Classic).unwrap();
    for (t, v) in e.iter().enumerate() {
        let h = adaptnet::mesh::diam_euclid(&m.coords(t));
        assert_relative_eq!(*v, h * h * m.area(t), max_relative = 1e-15);
    }

    // hat at (1,0) on the two-triangle square
    let sq = Mesh::initial(Domain::UnitSquare);
    let mut hat = DiscreteSolution::zero(&sq);
    hat.coefficients[1] = 1.0;
    let e = fem::residual_estimator(&sq, &hat, &Source::Constant(0.0), EstimatorForm::Classic).unwrap();
    let want = 2f64.sqrt() * 2.0 * 2f64.sqrt();
    for v in e {
        assert_relative_eq!(v, want, max_relative = 1e-15);
    }
}

#[test]
fn estimator_forms_are_equivalent() {
    let f = Source::Constant(1.0);
    for d in [Domain::UnitSquare, Domain::LShape, Domain::ZShape] {
        let mut m = Mesh::initial(d).uniform_refine();
        for _ in 0..4 {
            let u = fem::solve_poisson(&m, &f, 1e-12).unwrap();
            let a = fem::residual_estimator(&m, &u, &f, EstimatorForm::Classic).unwrap();
            let b = fem::residual_estimator(&m, &u, &f, EstimatorForm::DiamInf).unwrap();
            for (x, y) in a.iter().zip(&b) {
                let r = x / y;
                assert!((0.1..=10.0).contains(&r), "ratio {r}");
            }
            let total: f64 = a.iter().sum();
            assert_eq!(total, a.iter().fold(0.0, |s, v| s + v));
            m = m.refine(&[0, m.n_elements() / 2]).unwrap();
        }
    }
}
