use adaptnet::rnn_core::{read_deep_rnn, read_dnn, write_deep_rnn, write_dnn, BasicRnn, DeepRnn, Dnn, Wiring};
use proptest::prelude::*;

fn summation() -> BasicRnn {
    // y_i = x_i + y_{i-1}
    BasicRnn::new(Dnn::from_dense("sum", &[vec![vec![1.0, 1.0]]], false).unwrap(), 1).unwrap()
}

fn halving(init_with_last: bool) -> BasicRnn {
    if init_with_last {
        // input (p, q) with q the broadcast value; y = (q + y_prev)/2
        BasicRnn::new(Dnn::from_dense("half", &[vec![vec![0.0, 0.5, 0.5]]], false).unwrap(), 2).unwrap()
    } else {
        BasicRnn::new(Dnn::from_dense("half", &[vec![vec![0.5, 0.5]]], false).unwrap(), 1).unwrap()
    }
}

#[test]
fn identity_net_keeps_negative_values() {
    let id = Dnn::identity(1, 1);
    assert_eq!(id.eval(&[-3.5]).unwrap(), vec![-3.5]);
    let id3 = Dnn::identity(2, 3);
    assert_eq!(id3.eval(&[1.25, -7.0]).unwrap(), vec![1.25, -7.0]);
}

#[test]
fn matrix_multiplication_net() {
    let m = Dnn::from_dense("m", &[vec![vec![2.0, 0.0], vec![0.0, 3.0]]], false).unwrap();
    assert_eq!(m.eval(&[1.0, 1.0]).unwrap(), vec![2.0, 3.0]);
}

#[test]
fn summation_block_and_rnn() {
    let s = summation();
    assert_eq!(s.dnn().eval(&[2.0, 5.0]).unwrap(), vec![7.0]);
    let ys = s.eval(&[vec![1.0], vec![2.0], vec![3.0], vec![4.0]]).unwrap();
    assert_eq!(ys.last().unwrap(), &vec![10.0]);
    let z = s.eval(&vec![vec![0.0]; 5]).unwrap();
    assert!(z.iter().all(|v| v[0] == 0.0));
}

#[test]
fn halving_recurrence() {
    let h = halving(false);
    let ys = h.eval(&[vec![8.0], vec![0.0], vec![0.0]]).unwrap();
    assert_eq!(ys[2], vec![1.0]);
}

#[test]
fn two_stage_with_broadcast_initialization() {
    let d = DeepRnn::new(vec![summation(), halving(true)], vec![Wiring::Plain, Wiring::InitWithLast]).unwrap();
    let ys = d.eval(&[vec![1.0], vec![2.0], vec![3.0]]).unwrap();
    assert_eq!(ys, vec![vec![3.0], vec![1.5], vec![0.75]]);
    assert_eq!(DeepRnn::single(summation()).eval(&[vec![1.0], vec![2.0]]).unwrap(), summation().eval(&[vec![1.0], vec![2.0]]).unwrap());
}

#[test]
fn stacked_identity_stages() {
    let id = BasicRnn::new(Dnn::from_dense("id", &[vec![vec![1.0, 0.0]]], false).unwrap(), 1).unwrap();
    let d = DeepRnn::new(vec![id.clone(), id.clone(), id], vec![Wiring::Plain; 3]).unwrap();
    let xs = vec![vec![1.5], vec![-2.0], vec![0.25]];
    assert_eq!(d.eval(&xs).unwrap(), xs);
}

#[test]
fn unrolled_summation() {
    let s = summation();
    let u = s.unroll(4);
    let out = u.eval(&[1.0, 2.0, 3.0, 4.0]).unwrap();
    assert_eq!(out[3], 10.0);
    assert_eq!(u.budget().independent_weights, s.budget().independent_weights);
    let u8 = s.unroll(8);
    assert_eq!(u8.budget().independent_weights, s.budget().independent_weights);
    assert!(u8.budget().total_weights > u.budget().total_weights);
}

#[test]
fn parallel_and_compose() {
    let id = Dnn::identity(1, 1);
    let p = Dnn::parallel(&id, &id);
    assert_eq!(p.eval(&[1.0, 2.0]).unwrap(), vec![1.0, 2.0]);
    assert!(p.depth() <= id.depth() + 2);
    let sq = Dnn::from_dense("sq", &[vec![vec![1.0], vec![-1.0]], vec![vec![0.5, 0.5]]], false).unwrap();
    let c = Dnn::compose(&sq, &id).unwrap();
    for x in [-2.0, -0.3, 0.0, 1.7] {
        assert_eq!(c.eval(&[x]).unwrap(), sq.eval(&[x]).unwrap());
    }
    assert!(Dnn::compose(&p, &sq).is_err());
}

#[test]
fn pass_through_copies_extra_channel() {
    let d = DeepRnn::new(vec![summation(), halving(true)], vec![Wiring::Plain, Wiring::InitWithLast]).unwrap();
    let w = d.pass_through();
    let ys = w.eval(&[vec![1.0, 9.0], vec![2.0, -1.0], vec![3.0, 0.5]]).unwrap();
    assert_eq!(ys, vec![vec![3.0, 9.0], vec![1.5, -1.0], vec![0.75, 0.5]]);
}

#[test]
fn dimension_errors() {
    assert!(summation().eval(&[vec![1.0, 2.0]]).is_err());
    assert!(Dnn::identity(2, 1).eval(&[1.0]).is_err());
    assert!(Dnn::from_dense("x", &[vec![vec![1.0, 2.0]], vec![vec![1.0, 2.0]]], false).is_err());
}

#[test]
fn serialization_round_trip() {
    let d = DeepRnn::new(vec![summation(), halving(true)], vec![Wiring::Plain, Wiring::InitWithLast]).unwrap();
    let mut buf = Vec::new();
    write_deep_rnn(&mut buf, &d).unwrap();
    let back = read_deep_rnn(&buf[..]).unwrap();
    assert_eq!(back, d);
    let u = summation().unroll(5);
    let mut buf = Vec::new();
    write_dnn(&mut buf, &u).unwrap();
    assert_eq!(read_dnn(&buf[..]).unwrap(), u);
}

fn arb_rnn() -> impl Strategy<Value = (BasicRnn, Vec<f64>, usize)> {
    (1usize..3, 1usize..3, 1usize..4, 1usize..5, any::<bool>()).prop_flat_map(|(s, so, hidden, n, cs)| {
        let ins = s + so + usize::from(cs);
        (
            prop::collection::vec(prop::collection::vec(-2.0f64..2.0, ins), hidden),
            prop::collection::vec(prop::collection::vec(-2.0f64..2.0, hidden), so),
            prop::collection::vec(-10.0f64..10.0, n * s),
            Just((s, n, cs)),
        )
            .prop_map(|(w0, w1, xs, (s, n, cs))| {
                let dnn = Dnn::from_dense("r", &[w0, w1], cs).unwrap();
                (BasicRnn::new(dnn, s).unwrap(), xs, n)
            })
    })
}

proptest! {
    #[test]
    fn unroll_is_bit_exact((rnn, xs, n) in arb_rnn()) {
        let direct = rnn.eval_flat(&xs, n);
        let unrolled = rnn.unroll(n).eval(&xs).unwrap();
        prop_assert_eq!(direct.len(), unrolled.len());
        for (a, b) in direct.iter().zip(&unrolled) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn compose_is_exact((rnn, xs, _n) in arb_rnn(), shift in -1.0f64..1.0) {
        let inner = rnn.dnn();
        let outer = Dnn::from_dense("o", &[vec![vec![1.0; inner.output_size()], vec![-0.5; inner.output_size()]], vec![vec![1.0, shift]]], false).unwrap();
        let x: Vec<f64> = (0..inner.input_size()).map(|i| xs[i % xs.len()] * 0.3 + shift).collect();
        let c = Dnn::compose(&outer, inner).unwrap();
        let want = outer.eval(&inner.eval(&x).unwrap()).unwrap();
        let got = c.eval(&x).unwrap();
        prop_assert_eq!(want[0].to_bits(), got[0].to_bits());
    }
}
