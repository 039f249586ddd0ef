use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use transvg_core::{grad_check, Error, Tape, Tape64, Tensor, Tensor64};

fn t(shape: &[usize], data: &[f64]) -> Tensor64 {
    Tensor::from_f64(shape, data).unwrap()
}

#[test]
fn matmul_examples() {
    let mut tape = Tape64::new();
    let eye = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let ones = tape.constant(t(&[2, 1], &[1.0, 1.0]));
    let p = tape.matmul(eye, m).unwrap();
    assert_eq!(tape.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);
    let q = tape.matmul(m, ones).unwrap();
    assert_eq!(tape.value(q).shape(), &[2, 1]);
    assert_eq!(tape.value(q).data(), &[3.0, 7.0]);

    let a = tape.constant(Tensor::zeros(&[2, 3]));
    match tape.matmul(a, a) {
        Err(Error::Dimension { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected dimension error, got {other:?}"),
    }
}

#[test]
fn softmax_examples() {
    let mut tape = Tape64::new();
    let x = tape.constant(t(&[2], &[0.0, 0.0]));
    let s = tape.softmax(x, None).unwrap();
    assert_eq!(tape.value(s).data(), &[0.5, 0.5]);

    let x = tape.constant(t(&[2], &[2f64.ln(), 0.0]));
    let s = tape.softmax(x, None).unwrap();
    let v = tape.value(s).data();
    assert!((v[0] - 2.0 / 3.0).abs() < 1e-15 && (v[1] - 1.0 / 3.0).abs() < 1e-15);

    let x = tape.constant(t(&[2], &[5.0, 9.0]));
    let s = tape.softmax(x, Some(&[true, false])).unwrap();
    assert_eq!(tape.value(s).data(), &[1.0, 0.0]);

    assert!(matches!(
        tape.softmax(x, Some(&[false, false])),
        Err(Error::InvalidMask(_))
    ));
}

#[test]
fn softmax_rows_sum_to_one_and_masked_entries_are_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let data: Vec<f64> = (0..5 * 7).map(|_| rand::Rng::gen_range(&mut rng, -30.0..30.0)).collect();
        let mask: Vec<bool> = (0..7).map(|i| i % 3 != 1).collect();
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_f64(&[5, 7], &data).unwrap());
        let s = tape.softmax(x, Some(&mask)).unwrap();
        for row in tape.value(s).data().chunks(7) {
            let total: f32 = row.iter().sum();
            assert!((total - 1.0).abs() < 1e-6);
            for (c, &w) in row.iter().enumerate() {
                assert!(w >= 0.0);
                if !mask[c] {
                    assert_eq!(w, 0.0);
                }
            }
        }
    }
}

#[test]
fn layer_norm_examples() {
    let mut tape = Tape64::new();
    let x = tape.constant(t(&[1, 4], &[5.0; 4]));
    let g = tape.constant(Tensor::ones(&[4]));
    let b0 = tape.constant(Tensor::zeros(&[4]));
    let b1 = tape.constant(t(&[4], &[1.0, 2.0, 3.0, 4.0]));
    let y = tape.layer_norm(x, g, b0, 1e-5).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0; 4]);
    let y = tape.layer_norm(x, g, b1, 1e-5).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let row: Vec<f64> = (0..16).map(|_| rand::Rng::gen_range(&mut rng, -4.0..7.0)).collect();
    let x = tape.constant(t(&[1, 16], &row));
    let g = tape.constant(Tensor::ones(&[16]));
    let b = tape.constant(Tensor::zeros(&[16]));
    let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
    let out = tape.value(y).data();
    // independent recomputation of the moments
    let mean = out.iter().sum::<f64>() / 16.0;
    let var = out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
    assert!(mean.abs() < 1e-6);
    let raw_mean = row.iter().sum::<f64>() / 16.0;
    let raw_var = row.iter().map(|v| (v - raw_mean).powi(2)).sum::<f64>() / 16.0;
    assert!((var - raw_var / (raw_var + 1e-5)).abs() < 1e-9);

    let short = tape.constant(Tensor::ones(&[3]));
    assert!(tape.layer_norm(x, short, b, 1e-5).is_err());
}

#[test]
fn kernel_examples() {
    let mut tape = Tape64::new();
    let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
    let r = tape.relu(x);
    assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let y = tape.dropout(x, 0.1, false, &mut rng).unwrap();
    assert_eq!(tape.value(y), tape.value(x));
    assert!(tape.dropout(x, 1.0, true, &mut rng).is_err());

    let ones = tape.constant(Tensor::ones(&[10_000]));
    let d = tape.dropout(ones, 0.1, true, &mut rng).unwrap();
    let m = tape.mean(d);
    let mean = tape.value(m).data()[0];
    assert!((mean - 1.0).abs() < 0.02, "dropout mean {mean}");

    let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let b = tape.constant(t(&[2, 1], &[5.0, 6.0]));
    let c = tape.concat(&[a, b], 1).unwrap();
    assert_eq!(tape.value(c).data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
    let s = tape.slice(c, 1, 1..3).unwrap();
    assert_eq!(tape.value(s).data(), &[2.0, 5.0, 4.0, 6.0]);
    assert!(tape.concat(&[a, b], 0).is_err());
    assert!(tape.add(a, b).is_err());

    let table = tape.constant(t(&[3, 2], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]));
    let e = tape.embedding_lookup(table, &[2, 0, 2]).unwrap();
    assert_eq!(tape.value(e).data(), &[4.0, 5.0, 0.0, 1.0, 4.0, 5.0]);
    assert!(tape.embedding_lookup(table, &[3]).is_err());
}

#[test]
fn backward_examples() {
    let mut tape = Tape64::new();
    let x = tape.leaf(t(&[3], &[1.0, -2.0, 0.5]), true);
    let s = tape.sum(x);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);

    let mut tape = Tape64::new();
    let x = tape.leaf(t(&[3], &[1.0, -2.0, 0.5]), true);
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[2.0, -4.0, 1.0]);

    assert!(matches!(tape.backward(sq), Err(Error::Contract(_))));
}

#[test]
fn unused_leaves_receive_zero_gradient() {
    let mut tape = Tape64::new();
    let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
    let unused = tape.leaf(t(&[2, 2], &[1.0; 4]), true);
    let s = tape.sum(x);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.len(), 2);
    assert_eq!(g.get(unused).unwrap().data(), &[0.0; 4]);
}

#[test]
fn matmul_chain_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut rnd = |shape: &[usize]| {
        let n = shape.iter().product();
        let d: Vec<f64> = (0..n).map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0)).collect();
        t(shape, &d)
    };
    let inputs = vec![rnd(&[3, 4]), rnd(&[4, 5]), rnd(&[5, 2])];
    let report = grad_check(
        |tape, v| {
            let ab = tape.matmul(v[0], v[1])?;
            let abc = tape.matmul(ab, v[2])?;
            let sq = tape.mul(abc, abc)?;
            Ok(tape.sum(sq))
        },
        &inputs,
        1e-4,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn grad_check_of_sum_is_exact() {
    let x = t(&[2, 3], &[0.3, -1.0, 2.0, 5.0, 0.0, 1.5]);
    let report = grad_check(|tape, v| Ok(tape.sum(v[0])), &[x], 1e-4).unwrap();
    assert!(report.max_rel_error < 1e-10);
    assert_eq!(report.coordinates, 6);
}

#[test]
fn replay_is_bit_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::from_f64(&[4, 3], &[0.1, 0.2, -0.3, 0.4, 0.5, 0.6, -0.7, 0.8, 0.9, 1.0, 1.1, -1.2]).unwrap(), true);
        let d = tape.dropout(x, 0.5, true, &mut rng).unwrap();
        let s = tape.softmax(d, None).unwrap();
        let l = tape.sum(s);
        let l2 = tape.mul(s, s).unwrap();
        let l2 = tape.mean(l2);
        let tot = tape.add(l, l2).unwrap();
        let g = tape.backward(tot).unwrap();
        (tape.value(tot).clone(), g.get(x).unwrap().clone())
    };
    assert_eq!(run(), run());
}
