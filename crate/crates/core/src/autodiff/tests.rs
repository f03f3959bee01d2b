use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{check_gradients, op_suite};
use super::*;
use crate::error::Error;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

#[test]
fn matmul_identity_and_row_selection() {
    let mut tape = Tape::new();
    let i2 = tape.constant(Tensor::identity(2));
    let m = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
    let out = tape.matmul(i2, m).unwrap();
    assert_eq!(tape.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);

    let onehot = tape.constant(Tensor::matrix(1, 3, vec![1.0, 0.0, 0.0]).unwrap());
    let slots = tape.constant(Tensor::matrix(3, 2, vec![5.0, 6.0, 7.0, 8.0, 9.0, 10.0]).unwrap());
    let pick = tape.matmul(onehot, slots).unwrap();
    assert_eq!(tape.value(pick).data(), &[5.0, 6.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    match tape.matmul(a, b) {
        Err(Error::Shape { left, right, .. }) => {
            assert_eq!(left, vec![2, 3]);
            assert_eq!(right, vec![2, 3]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = random(&mut rng, &[3, 3]);
    let b = random(&mut rng, &[3, 3]);
    let r = check_gradients(&[a, b], 1e-5, |t, v| {
        let c = t.matmul(v[0], v[1])?;
        Ok(t.sum(c))
    })
    .unwrap();
    assert!(r.max_rel_err < 1e-6, "{r:?}");
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![0.0, 0.0, 0.0]).unwrap());
    let s = tape.softmax(x, 0).unwrap();
    for v in tape.value(s).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let big = tape.constant(Tensor::vector(vec![1000.0, 0.0]).unwrap());
    let s = tape.softmax(big, 0).unwrap();
    let d = tape.value(s).data();
    assert!(d.iter().all(|v| v.is_finite()));
    assert!((d[0] - 1.0).abs() < 1e-15 && d[1] < 1e-300);

    let nan = tape.constant(Tensor::vector(vec![f64::NAN, 1.0]).unwrap());
    assert!(matches!(
        tape.softmax(nan, 0),
        Err(Error::NumericInput { .. })
    ));
}

#[test]
fn softmax_gradient_length_five() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&mut rng, &[5]);
    let w = random(&mut rng, &[5]);
    let r = check_gradients(&[x, w], 1e-5, |t, v| {
        let s = t.softmax(v[0], 0)?;
        let p = t.mul(s, v[1])?;
        Ok(t.sum(p))
    })
    .unwrap();
    assert!(r.max_rel_err < 1e-6, "{r:?}");
}

#[test]
fn softmax_along_inner_axis() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_rows(&[vec![0.0, 1.0], vec![0.0, 1.0]]).unwrap());
    let s = tape.softmax(x, 0).unwrap();
    assert!(tape.value(s).data().iter().all(|v| (v - 0.5).abs() < 1e-15));
}

#[test]
fn cosine_examples() {
    let mut tape = Tape::new();
    let mut cos = |a: Vec<f64>, b: Vec<f64>| {
        let u = tape.constant(Tensor::vector(a).unwrap());
        let v = tape.constant(Tensor::vector(b).unwrap());
        let c = tape.cosine_similarity(u, v).unwrap();
        tape.scalar(c)
    };
    assert!((cos(vec![3.0, 4.0], vec![3.0, 4.0]) - 1.0).abs() < 1e-7);
    assert_eq!(cos(vec![1.0, 0.0], vec![0.0, 1.0]), 0.0);
    assert!((cos(vec![1.0, 0.0], vec![-1.0, 0.0]) + 1.0).abs() < 1e-7);
    assert_eq!(cos(vec![0.0, 0.0], vec![1.0, 2.0]), 0.0);
}

#[test]
fn cosine_gradient_at_zero_vector_is_finite() {
    let mut tape = Tape::new();
    let u = tape.leaf(
        Tensor::vector(vec![0.0, 0.0])
            .unwrap()
            .with_requires_grad(true),
    );
    let v = tape.leaf(
        Tensor::vector(vec![1.0, 2.0])
            .unwrap()
            .with_requires_grad(true),
    );
    let c = tape.cosine_similarity(u, v).unwrap();
    let g = tape.backward(c).unwrap();
    assert!(g.get(u).unwrap().iter().all(|x| x.is_finite()));
    assert!(g.get(v).unwrap().iter().all(|x| x.is_finite()));
}

#[test]
fn elementwise_examples() {
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::scalar(0.0));
    let s = tape.sigmoid(z);
    assert_eq!(tape.scalar(s), 0.5);

    for i in 0..=100 {
        let x = -5.0 + 0.1 * i as f64;
        let v = tape.constant(Tensor::scalar(x));
        let e = tape.exp(v);
        let l = tape.log(e).unwrap();
        assert!((tape.scalar(l) - x).abs() < 1e-12);
    }

    let bad = tape.constant(Tensor::vector(vec![1.0, 0.0]).unwrap());
    assert!(matches!(tape.log(bad), Err(Error::Domain { .. })));
}

#[test]
fn every_op_passes_gradient_check() {
    for seed in 0..5 {
        for (name, r) in op_suite(seed).unwrap() {
            assert!(r.max_rel_err < 1e-5, "op {name} seed {seed}: {r:?}");
        }
    }
}

#[test]
fn backward_examples() {
    let mut store = ParamStore::new();
    let id = store
        .add("p", Tensor::vector(vec![1.0, -2.0, 3.0]).unwrap())
        .unwrap();

    let mut tape = Tape::new();
    let p = tape.param(&store, id);
    let loss = tape.sum(p);
    tape.backward_into(loss, &mut store).unwrap();
    assert_eq!(store.get(id).grad().unwrap(), &[1.0, 1.0, 1.0]);

    // Second call accumulates.
    tape.backward_into(loss, &mut store).unwrap();
    assert_eq!(store.get(id).grad().unwrap(), &[2.0, 2.0, 2.0]);

    store.zero_grad();
    let mut tape = Tape::new();
    let p = tape.param(&store, id);
    let sq = tape.mul(p, p).unwrap();
    let s = tape.sum(sq);
    let loss = tape.scale(s, 0.5);
    tape.backward_into(loss, &mut store).unwrap();
    assert_eq!(store.get(id).grad().unwrap(), &[1.0, -2.0, 3.0]);

    match tape.backward(p) {
        Err(Error::Contract(_)) => {}
        other => panic!("expected contract error, got {other:?}"),
    }
}

#[test]
fn backward_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = random(&mut rng, &[4, 4]);
    let run = || {
        let mut tape = Tape::new();
        let v = tape.leaf(a.clone().with_requires_grad(true));
        let s = tape.softmax(v, 1).unwrap();
        let m = tape.matmul(s, v).unwrap();
        let l = tape.logsumexp(m, 1).unwrap();
        let loss = tape.sum(l);
        tape.backward(loss).unwrap().get(v).unwrap().to_vec()
    };
    let (g1, g2) = (run(), run());
    assert!(g1.iter().zip(&g2).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn constants_receive_no_gradient() {
    let mut tape = Tape::new();
    let c = tape.constant(Tensor::vector(vec![1.0, 2.0]).unwrap());
    let x = tape.leaf(
        Tensor::vector(vec![3.0, 4.0])
            .unwrap()
            .with_requires_grad(true),
    );
    let y = tape.mul(c, x).unwrap();
    let loss = tape.sum(y);
    let g = tape.backward(loss).unwrap();
    assert!(g.get(c).is_none());
    assert_eq!(g.get(x).unwrap(), &[1.0, 2.0]);
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn softmax_on_simplex(xs in prop::collection::vec(-50.0f64..50.0, 1..12)) {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::vector(xs).unwrap());
            let s = tape.softmax(x, 0).unwrap();
            let d = tape.value(s).data();
            prop_assert!(d.iter().all(|&v| v >= 0.0));
            prop_assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn cosine_in_range(
            u in prop::collection::vec(-1e3f64..1e3, 4),
            v in prop::collection::vec(-1e3f64..1e3, 4),
        ) {
            let mut tape = Tape::new();
            let a = tape.constant(Tensor::vector(u).unwrap());
            let b = tape.constant(Tensor::vector(v).unwrap());
            let c = tape.cosine_similarity(a, b).unwrap();
            let c = tape.scalar(c);
            prop_assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(&c));
        }
    }
}
