use adaptnet::mesh::{Domain, Mesh};
use proptest::prelude::*;

fn tri(p: [[f64; 2]; 3]) -> Mesh {
    Mesh::new(p.to_vec(), vec![[0, 1, 2]]).unwrap()
}

#[test]
fn initial_meshes_are_conforming() {
    let sq = Mesh::initial(Domain::UnitSquare);
    assert_eq!((sq.n_elements(), sq.n_vertices()), (2, 4));
    let l = Mesh::initial(Domain::LShape);
    assert_eq!(l.n_elements(), 6);
    let z = Mesh::initial(Domain::ZShape);
    assert!(z.n_elements() >= 8);
    for m in [&sq, &l, &z] {
        m.check_conforming().unwrap();
    }
    // the square's diagonal is the shared refinement edge
    let e = sq.elements();
    let r0 = [e[0].vertices[1], e[0].vertices[2]];
    let r1 = [e[1].vertices[1], e[1].vertices[2]];
    assert!(r0 == r1 || r0 == [r1[1], r1[0]]);
}

#[test]
fn z_shape_area_excludes_slit() {
    let z = Mesh::initial(Domain::ZShape);
    let area: f64 = (0..z.n_elements()).map(|t| z.area(t)).sum();
    assert!((area - (4.0 - 0.1)).abs() < 1e-14);
}

#[test]
fn empty_marking_is_identity() {
    let l = Mesh::initial(Domain::LShape).uniform_refine();
    let r = l.refine(&[]).unwrap();
    assert_eq!(r, l);
    assert_eq!(r.to_text(), l.to_text());
}

#[test]
fn marking_diagonal_element_forces_neighbour() {
    let sq = Mesh::initial(Domain::UnitSquare);
    let r = sq.refine(&[0]).unwrap();
    assert_eq!(r.n_elements(), 4);
    r.check_conforming().unwrap();
    assert_eq!(&r.vertices()[..4], sq.vertices());
}

#[test]
fn marking_everything_at_least_doubles() {
    let l = Mesh::initial(Domain::LShape);
    let r = l.refine(&(0..6).collect::<Vec<_>>()).unwrap();
    assert!(r.n_elements() >= 12);
    r.check_conforming().unwrap();
    for e in r.elements() {
        assert!(e.level >= 1);
    }
}

#[test]
fn uniform_refinement_quadruples() {
    let sq = Mesh::initial(Domain::UnitSquare);
    let u = sq.uniform_refine();
    assert_eq!(u.n_elements(), 8);
    u.check_conforming().unwrap();
    let z = Mesh::initial(Domain::ZShape);
    let uz = z.uniform_refine().uniform_refine();
    assert_eq!(uz.n_elements(), 16 * z.n_elements());
    uz.check_conforming().unwrap();
}

#[test]
fn invalid_ids_are_rejected() {
    let sq = Mesh::initial(Domain::UnitSquare);
    assert!(sq.refine(&[2]).is_err());
    assert!(sq.patch(5).is_err());
    assert!(sq.geometry(2).is_err());
}

#[test]
fn patches() {
    let sq = Mesh::initial(Domain::UnitSquare);
    assert_eq!(sq.patch(0).unwrap().len(), 2);
    let u = sq.uniform_refine().uniform_refine();
    let nb = u.neighbors();
    let interior = (0..u.n_elements()).find(|&t| nb[t].iter().all(Option::is_some)).unwrap();
    assert_eq!(u.patch(interior).unwrap().len(), 4);
    for a in 0..u.n_elements() {
        for &b in &u.patch(a).unwrap() {
            assert!(u.patch(b).unwrap().contains(&a));
        }
    }
}

#[test]
fn geometry_examples() {
    let g = tri([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]).geometry(0).unwrap();
    assert_eq!(g.area, 0.5);
    assert_eq!(g.diam_inf, 1.0);
    assert!((g.perimeter - (2.0 + 2f64.sqrt())).abs() < 1e-15);
    assert_eq!(tri([[0.0, 0.0], [2.0, 0.0], [0.0, 1.0]]).geometry(0).unwrap().diam_inf, 2.0);
    assert_eq!(tri([[0.0, 0.0], [1.0, 1.0], [-1.0, 1.0]]).geometry(0).unwrap().diam_inf, 2.0);
}

#[test]
fn degenerate_elements_are_rejected() {
    assert!(Mesh::new(vec![[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]], vec![[0, 1, 2]]).is_err());
    assert!(Mesh::new(vec![[0.0, 0.0], [0.0, 1.0], [1.0, 0.0]], vec![[0, 1, 2]]).is_err());
}

#[test]
fn text_round_trip() {
    let mut m = Mesh::initial(Domain::ZShape);
    for _ in 0..3 {
        m = m.refine(&[0, m.n_elements() - 1]).unwrap();
    }
    let s = m.to_text();
    let back = Mesh::from_text(s.as_bytes()).unwrap();
    assert_eq!(back.vertices(), m.vertices());
    assert_eq!(back.to_text(), s);
    for (a, b) in back.vertices().iter().zip(m.vertices()) {
        assert_eq!(a[0].to_bits(), b[0].to_bits());
        assert_eq!(a[1].to_bits(), b[1].to_bits());
    }
    assert_eq!(back.boundary_edges(), m.boundary_edges());
    assert!(Mesh::from_text("vertices 1 elements x\n".as_bytes()).is_err());
}

fn domain() -> impl Strategy<Value = Domain> {
    prop_oneof![Just(Domain::UnitSquare), Just(Domain::LShape), Just(Domain::ZShape)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]
    #[test]
    fn refinement_invariants(d in domain(), picks in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 1..6), 1..7)) {
        let m0 = Mesh::initial(d);
        let bound = m0.uniform_refine().uniform_refine().min_angle().min(m0.uniform_refine().min_angle()).min(m0.min_angle());
        let mut m = m0;
        for step in picks {
            let marked: Vec<usize> = step.iter().map(|u| ((u * m.n_elements() as f64) as usize).min(m.n_elements() - 1)).collect();
            let r = m.refine(&marked).unwrap();
            r.check_conforming().unwrap();
            prop_assert_eq!(&r.vertices()[..m.n_vertices()], m.vertices());
            prop_assert!(r.min_angle() >= bound - 1e-12);
            prop_assert_eq!(r.generation(), m.generation() + 1);
            // each marked element was bisected; every new leaf descends from an old leaf
            let old = m.lineages();
            for e in r.elements() {
                prop_assert!(old.iter().any(|o| o.is_ancestor_of(e.lineage)));
            }
            for &k in &marked {
                prop_assert!(!r.lineages().contains(&old[k]));
            }
            m = r;
        }
    }
}
