use adaptnet::cli::*;
use adaptnet::fem::*;
use adaptnet::mesh::*;
use adaptnet::stochastic_greedy::{eta, GradientSurrogate};
use std::process::Command as Proc;

fn cfg(c: Command) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(c);
    cfg.svg = false;
    cfg
}

#[test]
fn csv_round_trip() {
    assert_eq!(csv_text(&[]), format!("{CSV_HEADER}\n"));
    assert!(parse_csv(&csv_text(&[])).unwrap().is_empty());
    let recs = vec![
        ConvergenceRecord { step: 0, n_elements: 6, estimator: 2.449489742783178, energy: 0.0, time_ms: 0.125 },
        ConvergenceRecord { step: 1, n_elements: 12, estimator: 1.0 / 3.0, energy: 1e-300, time_ms: 7.0 },
    ];
    assert_eq!(parse_csv(&csv_text(&recs)).unwrap(), recs);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("r.csv");
    emit_csv(&recs, &p).unwrap();
    assert_eq!(read_csv(&p).unwrap(), recs);
    assert!(parse_csv("a,b\n").is_err());
    assert!(parse_csv(&format!("{CSV_HEADER}\n1,2,3\n")).is_err());
}

#[test]
fn svg_has_one_polygon_per_element() {
    let mesh = Mesh::initial(Domain::LShape);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.svg");
    emit_svg(&mesh, None, &p).unwrap();
    let s = std::fs::read_to_string(&p).unwrap();
    assert_eq!(s.matches("<polygon").count(), 6);
    assert!(s.contains("viewBox=\"-1.04 -1.04 2.08 2.08\""));
    let field: Vec<f64> = (0..6).map(|i| i as f64).collect();
    emit_svg(&mesh, Some(&field), &p).unwrap();
    let s = std::fs::read_to_string(&p).unwrap();
    assert!(s.contains("rgb(255,96,0)") && s.contains("rgb(0,96,255)"));
    assert!(emit_svg(&mesh, Some(&field[..3]), &p).is_err());
}

#[test]
fn slope_fit() {
    let recs: Vec<ConvergenceRecord> = [100usize, 1000, 4000, 16000]
        .iter()
        .enumerate()
        .map(|(i, &n)| ConvergenceRecord { step: i, n_elements: n, estimator: 3.0 * (n as f64).powf(-0.5), energy: 0.0, time_ms: 0.0 })
        .collect();
    assert!((fit_slope(&recs).unwrap() + 0.5).abs() < 1e-12);
    assert_eq!(fit_slope(&recs[..2]), None);
}

#[test]
fn config_precedence() {
    let file = "# comment\ntheta = 0.3\nmax_elements=500\nout_dir = from_file\nseed = 4\n";
    let c = resolve_config(Command::Uniform, Some(file), None, &[]).unwrap();
    assert_eq!((c.theta, c.max_elements, c.seed), (0.3, 500, 4));
    assert_eq!(c.out_dir.to_str(), Some("from_file"));
    let c = resolve_config(Command::Uniform, Some(file), Some("from_env"), &[]).unwrap();
    assert_eq!(c.out_dir.to_str(), Some("from_env"));
    let flags = vec![("theta".to_string(), "0.7".to_string()), ("out_dir".to_string(), "from_flag".to_string())];
    let c = resolve_config(Command::Uniform, Some(file), Some("from_env"), &flags).unwrap();
    assert_eq!(c.theta, 0.7);
    assert_eq!(c.out_dir.to_str(), Some("from_flag"));
    assert_eq!(c.max_elements, 500);

    let e = resolve_config(Command::Uniform, Some("theta = 1.5"), None, &[]).unwrap_err();
    assert_eq!(e.exit_code(), 2);
    assert!(resolve_config(Command::Uniform, Some("nonsense"), None, &[]).is_err());
    assert!(resolve_config(Command::Uniform, Some("colour = red"), None, &[]).is_err());
    assert!(resolve_config(Command::Uniform, None, None, &[("domain".into(), "circle".into())]).is_err());
    for c in Command::ALL {
        assert_eq!(c.name().parse::<Command>().unwrap(), c);
    }
}

#[test]
fn loose_tolerance_gives_one_record() {
    let mut c = cfg(Command::AdaptClassical);
    c.eps_tol = 100.0;
    let run = run_adapt_classical(&c).unwrap();
    assert_eq!(run.records.len(), 1);
    assert_eq!(run.records[0].n_elements, 6);
}

#[test]
fn classical_and_uniform_loops() {
    let mut c = cfg(Command::AdaptClassical);
    c.max_elements = 400;
    let run = run_adapt_classical(&c).unwrap();
    assert!(run.records.windows(2).all(|w| w[1].n_elements > w[0].n_elements));
    assert!(run.records.last().unwrap().n_elements > 400);
    assert!(run.records.iter().rev().skip(1).all(|r| r.n_elements <= 400));
    let u = run_uniform(&ExperimentConfig { command: Command::Uniform, ..c }).unwrap();
    assert!(u.records.windows(2).all(|w| w[1].n_elements == 2 * w[0].n_elements));
}

#[test]
fn rnn_marks_agree_outside_the_band() {
    let mut c = cfg(Command::AdaptRnn);
    c.max_elements = 300;
    let r = run_adapt_rnn(&c).unwrap();
    assert!(r.marks.len() >= 5);
    for m in &r.marks {
        assert!(m.n_mismatch <= m.band, "{m:?}");
    }
    assert!(!r.stopped_by_network);
    let text = marks_csv_text(&r.marks);
    assert_eq!(text.lines().count(), r.marks.len() + 1);
}

#[test]
fn rnn_stops_through_the_network() {
    // tolerance between the two estimator forms: only the network's sum fires
    let mesh = Mesh::initial(Domain::LShape).uniform_refine();
    let f = Source::Constant(1.0);
    let u = solve_poisson(&mesh, &f, 1e-10).unwrap();
    let s_inf: f64 = residual_estimator(&mesh, &u, &f, EstimatorForm::DiamInf).unwrap().iter().sum();
    let s_cl: f64 = residual_estimator(&mesh, &u, &f, EstimatorForm::Classic).unwrap().iter().sum();
    assert!(s_inf < 0.99 * s_cl, "{s_inf} {s_cl}");
    let mut c = cfg(Command::AdaptRnn);
    c.initial_refinements = Some(1);
    c.eps_tol = (0.5 * (s_inf + s_cl)).sqrt();
    let r = run_adapt_rnn(&c).unwrap();
    assert!(r.stopped_by_network);
    assert_eq!(r.run.records.len(), 1);
}

#[test]
fn greedy_stops_for_large_tolerance() {
    let mut c = cfg(Command::Greedy);
    c.surrogate = SurrogateChoice::Smooth;
    let v = GradientSurrogate::smooth();
    let mesh = Mesh::initial(Domain::LShape);
    let eta0 = (0..6).map(|t| eta(&mesh, t, &v)).fold(0.0, f64::max);
    c.eps_tol = 1.01 * eta0;
    let r = run_greedy(&c).unwrap();
    assert_eq!(r.records.len(), 1);
    assert_eq!(r.tris.len(), 6);
    c.eps_tol = 0.5 * eta0;
    assert!(run_greedy(&c).unwrap().tris.len() > 6);
}

#[test]
fn stochastic_greedy_driver() {
    let mut c = cfg(Command::GreedyStochastic);
    c.eps_tol = 0.05;
    let a = run_greedy_stochastic(&c).unwrap();
    let b = run_greedy_stochastic(&c).unwrap();
    assert_eq!(a.tris, b.tris);
    assert!(a.tris.len() > 6);
    assert_eq!(a.generations.last().unwrap().n_marked, 0);
}

#[test]
fn fixture_run_is_near_optimal() {
    let mut c = cfg(Command::TrainMaxstrategy);
    c.max_elements = 5000;
    let r = run_train_maxstrategy(&c).unwrap();
    assert!(!r.trained && !r.stalled);
    assert!(fit_slope(&r.records).unwrap() <= -0.4);
}

#[test]
fn training_emits_both_curves() {
    let mut c = cfg(Command::TrainOnTheJob);
    c.steps = 3;
    c.n_train = 3;
    let r = run_train_on_the_job(&c).unwrap();
    assert_eq!(r.learned.len(), 4);
    assert_eq!(r.learned[0].n_elements, 128);
    assert!(r.uniform.last().unwrap().n_elements >= r.learned.last().unwrap().n_elements);
    assert!(r.uniform_at_final().is_some());
}

#[test]
fn run_writes_files() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = ExperimentConfig::new(Command::AdaptClassical);
    c.max_elements = 200;
    c.out_dir = dir.path().join("nested");
    let rep = run(&c).unwrap();
    assert_eq!(rep.files.len(), 2);
    let recs = read_csv(&rep.files[0]).unwrap();
    assert!(recs.len() > 3);
    assert!(std::fs::read_to_string(&rep.files[1]).unwrap().contains("<polygon"));
}

#[test]
fn binary_exit_codes() {
    let exe = env!("CARGO_BIN_EXE_adaptnet");
    let dir = tempfile::tempdir().unwrap();
    let ok = Proc::new(exe)
        .args(["uniform", "--max-elements", "50", "--svg", "false"])
        .env(OUT_DIR_ENV, dir.path())
        .output()
        .unwrap();
    assert_eq!(ok.status.code(), Some(0));
    assert!(dir.path().join("uniform.csv").exists());
    let bad = Proc::new(exe).args(["uniform", "--theta", "2"]).env(OUT_DIR_ENV, dir.path()).output().unwrap();
    assert_eq!(bad.status.code(), Some(2));
    let cfgfile = dir.path().join("c.txt");
    std::fs::write(&cfgfile, "max_elements = 30\nsvg = false\n").unwrap();
    let ok = Proc::new(exe)
        .args(["adapt-classical", "--config", cfgfile.to_str().unwrap(), "--out-dir", dir.path().join("o").to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(ok.status.code(), Some(0));
    let recs = read_csv(&dir.path().join("o/adapt_classical.csv")).unwrap();
    assert!(recs.last().unwrap().n_elements > 30);
    let unknown = Proc::new(exe).args(["explode"]).output().unwrap();
    assert_eq!(unknown.status.code(), Some(2));
}
