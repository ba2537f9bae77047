mod common;

use adaptnet::mesh::{Domain, Mesh};
use adaptnet::rnn_core::Dnn;
use adaptnet::stochastic_greedy::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn reference() -> Mesh {
    Mesh::new(vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], vec![[0, 1, 2]]).unwrap()
}

fn linear() -> GradientSurrogate {
    GradientSurrogate::analytic(2.0, |p| [p[0], 0.0])
}

#[test]
fn eta_examples() {
    let m = reference();
    assert_eq!(eta(&m, 0, &GradientSurrogate::constant([1.5, -2.0])), 0.0);
    // ∫_T (x − 1/3)² = 1/12 − 1/18
    assert!((eta(&m, 0, &linear()).powi(2) - 1.0 / 36.0).abs() < 1e-14);
}

#[test]
fn eta_decreases_under_bisection() {
    let mesh = Mesh::initial(Domain::LShape);
    for v in [GradientSurrogate::corner_singularity(), GradientSurrogate::smooth(), linear()] {
        let mut nc = NcMesh::from_mesh(&mesh);
        for t in 0..mesh.n_elements() {
            let parent = eta_tri(&nc.leaves[t].0, &v).powi(2);
            nc.bisect(t);
            let kids = eta_tri(&nc.leaves[t].0, &v).powi(2) + eta_tri(&nc.leaves.last().unwrap().0, &v).powi(2);
            assert!(kids <= parent * (1.0 + 1e-12), "{kids} > {parent}");
        }
    }
}

#[test]
fn mc_indicator_basics() {
    let m = reference();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        assert_eq!(mc_indicator(&m, 0, &GradientSurrogate::constant([3.0, 1.0]), 4, &mut rng), 0.0);
    }
    // N = 1 is |T|·|V(x) − V(y)|²
    let v = GradientSurrogate::smooth();
    let p = m.coords(0);
    let mut a = ChaCha8Rng::seed_from_u64(9);
    let mut b = a.clone();
    let rho = mc_indicator_tri(&p, &v, 1, &mut a);
    let (x, y) = (sample_point(&p, &mut b), sample_point(&p, &mut b));
    let (vx, vy) = (v.eval(x), v.eval(y));
    let want = 0.5 * ((vx[0] - vy[0]).powi(2) + (vx[1] - vy[1]).powi(2));
    assert!((rho * rho - want).abs() <= 1e-15 * want.max(1.0));
}

#[test]
fn mc_indicator_is_unbiased() {
    let m = reference();
    let v = GradientSurrogate::smooth();
    let e2 = eta(&m, 0, &v).powi(2);
    for n in [1usize, 4, 16] {
        let draws = 20_000;
        let xs: Vec<f64> = (0..draws)
            .map(|d| mc_indicator(&m, 0, &v, n, &mut draw_rng(5, 0, n as u64, d)).powi(2) / ((1.0 + 1.0 / n as f64) * e2))
            .collect();
        let mean = xs.iter().sum::<f64>() / draws as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (draws as f64 - 1.0);
        let se = (var / draws as f64).sqrt();
        assert!((mean - 1.0).abs() <= 4.0 * se, "N={n}: mean {mean} se {se}");
    }
}

#[test]
fn draws_are_reproducible() {
    use rand::Rng;
    let a: u64 = draw_rng(1, 2, 3, 4).gen();
    let b: u64 = draw_rng(1, 2, 3, 4).gen();
    let c: u64 = draw_rng(1, 2, 3, 5).gen();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn greedy_examples() {
    let mesh = Mesh::initial(Domain::LShape);
    let out = greedy_refine(&mesh, &GradientSurrogate::constant([1.0, 1.0]), 1e-3).unwrap();
    assert_eq!(out, NcMesh::from_mesh(&mesh));
    let v = GradientSurrogate::corner_singularity();
    let eps = 0.02;
    let out = greedy_refine(&mesh, &v, eps).unwrap();
    assert!(out.n_elements() > mesh.n_elements());
    assert!(out.leaves.iter().all(|l| eta_tri(&l.0, &v) <= eps));
    assert!(out.refines(&NcMesh::from_mesh(&mesh)));
    assert!(greedy_refine(&mesh, &v, 0.0).is_err());
}

#[test]
fn greedy_is_scale_invariant() {
    let mesh = Mesh::initial(Domain::LShape);
    let v = GradientSurrogate::corner_singularity();
    let a = greedy_refine(&mesh, &v, 0.05).unwrap();
    let b = greedy_refine(&mesh, &v.scaled(8.0), 0.4).unwrap();
    assert_eq!(a, b);
}

#[test]
fn greedy_output_is_coarsest_admissible() {
    let mesh = Mesh::initial(Domain::UnitSquare);
    let forests = common::all_forests(&mesh, 3);
    assert_eq!(forests.len(), 26 * 26);
    let v = GradientSurrogate::corner_singularity();
    let top = (0..2).map(|t| eta(&mesh, t, &v)).fold(0.0, f64::max);
    let eps = 0.7 * top;
    let g = greedy_refine(&mesh, &v, eps).unwrap();
    let mut admissible = 0;
    for f in &forests {
        if f.leaves.iter().all(|l| eta_tri(&l.0, &v) <= eps) {
            admissible += 1;
            assert!(f.refines(&g));
        }
    }
    assert!(admissible > 0);
}

#[test]
fn stochastic_constant_field_stops_immediately() {
    let mesh = Mesh::initial(Domain::LShape);
    let v = GradientSurrogate::constant([1.0, 2.0]);
    let cfg = GreedyConfig { eps: 1e-3, k: 4, n: 1, m: 1, seed: 1 };
    let out = stochastic_greedy_refine(&mesh, &Sampler::MonteCarlo(&v), &cfg).unwrap();
    assert_eq!(out.mesh, mesh);
    assert_eq!(out.trace.len(), 1);
    assert_eq!(out.state.stop_set.len(), mesh.n_elements());
}

#[test]
fn stochastic_with_exact_indicator_is_a_threshold_sweep() {
    let mesh = Mesh::initial(Domain::LShape);
    let v = GradientSurrogate::corner_singularity();
    let cfg = GreedyConfig { eps: 0.03, k: 1, n: 1, m: 1, seed: 0 };
    let out = stochastic_greedy_refine(&mesh, &Sampler::Exact(&v), &cfg).unwrap();
    for t in 0..out.mesh.n_elements() {
        assert!(eta(&out.mesh, t, &v) <= cfg.eps * (1.0 + 1e-12));
        assert!(out.state.covers(out.mesh.elements()[t].lineage));
    }
    out.mesh.check_conforming().unwrap();
    // same mesh as a direct sweep that refines every element above eps
    let mut m = mesh.clone();
    loop {
        let marks: Vec<usize> = (0..m.n_elements()).filter(|&t| eta(&m, t, &v) > cfg.eps).collect();
        if marks.is_empty() {
            break;
        }
        m = m.refine(&marks).unwrap();
    }
    assert!(out.mesh.n_elements() <= m.n_elements());
}

#[test]
fn stochastic_run_is_reproducible_and_sound() {
    let mesh = Mesh::initial(Domain::LShape);
    let v = GradientSurrogate::corner_singularity();
    let cfg = GreedyConfig { eps: 0.03, k: 8, n: 1, m: 1, seed: 42 };
    let a = stochastic_greedy_refine(&mesh, &Sampler::MonteCarlo(&v), &cfg).unwrap();
    let b = stochastic_greedy_refine(&mesh, &Sampler::MonteCarlo(&v), &cfg).unwrap();
    assert_eq!(a.mesh, b.mesh);
    assert_eq!(a.trace, b.trace);
    for e in a.mesh.elements() {
        assert!(a.state.covers(e.lineage));
    }
    // stopped elements are never marked afterwards
    let stop = &a.state.stop_set;
    for l in stop {
        assert!(!stop.iter().any(|o| o != l && o.is_ancestor_of(*l)));
    }
}

#[test]
fn rho_net_matches_formula() {
    let n = 12;
    let id = Dnn::identity(2, 1);
    let rho = build_rho_net(&id, n).unwrap();
    let cases = [[0.1, 0.2, 0.7, 0.1, 0.5f64.sqrt()], [0.9, 0.05, 0.0, 0.3, 0.25]];
    for c in cases {
        let out = rho.eval(&c).unwrap();
        for i in 0..2 {
            let want = c[4] * (c[i] - c[2 + i]).abs();
            assert!((out[i] - want).abs() <= 2.0 * 4f64.powi(-(n as i32)), "{} vs {want}", out[i]);
        }
    }
    let flat = Dnn::from_dense("v", &[vec![vec![0.0, 0.0], vec![0.0, 0.0]]], false).unwrap();
    let rho0 = build_rho_net(&flat, n).unwrap();
    assert!(rho0.eval(&cases[0]).unwrap().iter().all(|v| v.abs() <= 2.0 * 4f64.powi(-(n as i32))));
    let ad = adaptive_from_rho(&rho0, 3, 1e-2).unwrap();
    let input: Vec<f64> = (0..3).flat_map(|_| cases[0]).collect();
    assert_eq!(ad.eval_flat(&input, 1)[0], 0.0);

    let ad = adaptive_from_rho(&rho, 2, 0.1).unwrap();
    let small = [0.1, 0.1, 0.12, 0.1, 1.0];
    let big = [0.0, 0.0, 1.0, 0.0, 1.0];
    let run = |a: &[f64; 5], b: &[f64; 5]| ad.eval_flat(&[a.as_slice(), b.as_slice()].concat(), 1)[0];
    assert_eq!(run(&small, &small), 0.0);
    assert!((run(&small, &big) - 0.9).abs() < 1e-6);
    assert!(build_rho_net(&Dnn::identity(3, 1), 4).is_err());
}

#[test]
fn stochastic_network_sampler_terminates() {
    let mesh = Mesh::initial(Domain::LShape);
    let vnet = Dnn::from_dense("v", &[vec![vec![2.0, 0.0], vec![0.0, -1.0]]], false).unwrap();
    let v = GradientSurrogate::network(vnet.clone(), 2.0).unwrap();
    let k = 4;
    let ad = adaptive_from_rho(&build_rho_net(&vnet, 8).unwrap(), k, 0.05).unwrap();
    let cfg = GreedyConfig { eps: 0.05, k, n: 1, m: 1, seed: 3 };
    let out = stochastic_greedy_refine(&mesh, &Sampler::Network { adaptive: &ad, v: &v }, &cfg).unwrap();
    assert!(out.mesh.n_elements() > mesh.n_elements());
    for e in out.mesh.elements() {
        assert!(out.state.covers(e.lineage));
    }
}
