use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{self, random_tensor, DEFAULT_STEP};
use super::*;
use crate::error::Error;

fn mat(r: usize, c: usize, v: &[f64]) -> Tensor {
    Tensor::matrix(r, c, v.to_vec()).unwrap()
}

#[test]
fn matmul_identity_and_hand_product() {
    let mut tape = Tape::new();
    let a = tape.constant(&mat(3, 3, &[1., 2., 3., 4., 5., 6., 7., 8., 9.]));
    let eye = tape.constant(&mat(3, 3, &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
    let c = tape.matmul(a, eye).unwrap();
    assert_eq!(tape.value(c), tape.value(a));

    let a = tape.constant(&mat(2, 2, &[1., 2., 3., 4.]));
    let b = tape.constant(&mat(2, 1, &[1., 1.]));
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.shape(c), &[2, 1]);
    assert_eq!(tape.value(c), &[3.0, 7.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(&Tensor::zeros(&[2, 3]));
    let b = tape.constant(&Tensor::zeros(&[2, 3]));
    let err = tape.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]") && err.contains("dimension"), "{err}");
}

#[test]
fn matmul_gradient_of_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = random_tensor(&[3, 4], 1.0, &mut rng);
    let b = random_tensor(&[4, 2], 1.0, &mut rng);
    let res = gradcheck::check(&[a, b], 7, DEFAULT_STEP, |t, v| {
        let c = t.matmul(v[0], v[1])?;
        Ok(t.sum(c))
    })
    .unwrap();
    assert!(res.max_rel_error() < 1e-6, "{res:?}");
}

#[test]
fn layer_norm_constant_row_collapses_to_bias() {
    let mut tape = Tape::new();
    let x = tape.constant(&mat(1, 4, &[2.5; 4]));
    let g = tape.constant(&Tensor::vector(vec![1.0, 2.0, 3.0, 4.0]));
    let b = tape.constant(&Tensor::vector(vec![0.1, -0.2, 0.3, -0.4]));
    let y = tape.layer_norm(x, g, b, DEFAULT_LN_EPS).unwrap();
    assert_eq!(tape.value(y), &[0.1, -0.2, 0.3, -0.4]);
}

#[test]
fn layer_norm_two_element_closed_form() {
    let mut tape = Tape::new();
    let x = tape.constant(&mat(1, 2, &[1.0, -1.0]));
    let g = tape.constant(&Tensor::ones(&[2]));
    let b = tape.constant(&Tensor::zeros(&[2]));
    let y = tape.layer_norm(x, g, b, DEFAULT_LN_EPS).unwrap();
    // mean 0, variance 1: x / sqrt(1 + eps)
    let expect = 1.0 / (1.0 + DEFAULT_LN_EPS).sqrt();
    let v = tape.value(y);
    assert!((v[0] - expect).abs() < 1e-15 && (v[1] + expect).abs() < 1e-15);
    assert!((v[0] - 1.0).abs() < 1e-5);
}

#[test]
fn layer_norm_rejects_mismatched_gain() {
    let mut tape = Tape::new();
    let x = tape.constant(&Tensor::zeros(&[2, 3]));
    let g = tape.constant(&Tensor::ones(&[4]));
    let b = tape.constant(&Tensor::zeros(&[3]));
    assert!(matches!(
        tape.layer_norm(x, g, b, 1e-5),
        Err(Error::Dimension { .. })
    ));
}

#[test]
fn layer_norm_gradients() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor(&[3, 5], 2.0, &mut rng);
        let g = random_tensor(&[5], 1.5, &mut rng);
        let b = random_tensor(&[5], 1.0, &mut rng);
        let res = gradcheck::check(&[x, g, b], seed, DEFAULT_STEP, |t, v| {
            t.layer_norm(v[0], v[1], v[2], DEFAULT_LN_EPS)
        })
        .unwrap();
        assert!(res.max_rel_error() < 1e-5, "seed {seed}: {res:?}");
    }
}

fn brute_force_ce(logits: &[f64], k: usize, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (row, &label) in logits.chunks(k).zip(labels) {
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        total += -(row[label].exp() / z).ln();
    }
    total / labels.len() as f64
}

#[test]
fn cross_entropy_reference_values() {
    let mut tape = Tape::new();
    let l = tape.constant(&mat(1, 2, &[0.0, 0.0]));
    let loss = tape.softmax_cross_entropy(l, &[0]).unwrap();
    assert!((tape.item(loss) - std::f64::consts::LN_2).abs() < 1e-15);

    let l = tape.constant(&mat(1, 2, &[1000.0, 0.0]));
    let loss = tape.softmax_cross_entropy(l, &[0]).unwrap();
    assert!(tape.item(loss).is_finite() && tape.item(loss).abs() < 1e-300);

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let logits = random_tensor(&[3, 5], 3.0, &mut rng);
    let labels = [4, 0, 2];
    let l = tape.constant(&logits);
    let loss = tape.softmax_cross_entropy(l, &labels).unwrap();
    let oracle = brute_force_ce(logits.data(), 5, &labels);
    assert!((tape.item(loss) - oracle).abs() < 1e-12);
}

#[test]
fn cross_entropy_label_out_of_range() {
    let mut tape = Tape::new();
    let l = tape.constant(&Tensor::zeros(&[2, 3]));
    assert!(matches!(
        tape.softmax_cross_entropy(l, &[0, 3]),
        Err(Error::Index { index: 3, bound: 3, .. })
    ));
}

#[test]
fn cross_entropy_backward_is_softmax_minus_onehot() {
    let mut tape = Tape::new();
    let l = tape.variable(&mat(2, 2, &[0.0, 0.0, 1.0, 1.0]));
    let loss = tape.softmax_cross_entropy(l, &[1, 0]).unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.wrt(l).unwrap(), &[0.25, -0.25, -0.25, 0.25]);
}

#[test]
fn cosine_reference_values() {
    let mut tape = Tape::new();
    let u = tape.constant(&Tensor::vector(vec![1.0, 2.0, -3.0]));
    let c = tape.cosine_similarity(u, u).unwrap();
    assert!((tape.item(c) - 1.0).abs() < 1e-15);
    let a = tape.constant(&Tensor::vector(vec![1.0, 0.0]));
    let b = tape.constant(&Tensor::vector(vec![0.0, 2.0]));
    let c = tape.cosine_similarity(a, b).unwrap();
    assert_eq!(tape.item(c), 0.0);
    let z = tape.constant(&Tensor::zeros(&[2]));
    assert!(matches!(
        tape.cosine_similarity(a, z),
        Err(Error::Degenerate { .. })
    ));
}

#[test]
fn cosine_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let u = random_tensor(&[6], 1.0, &mut rng);
    let v = random_tensor(&[6], 1.0, &mut rng);
    let res = gradcheck::check(&[u, v], 3, DEFAULT_STEP, |t, x| t.cosine_similarity(x[0], x[1]))
        .unwrap();
    assert!(res.max_rel_error() < 1e-6, "{res:?}");
}

#[test]
fn attention_rows_are_convex_combinations_of_values() {
    // With all-zero queries and keys, attention averages the visible values.
    let mut data = vec![0.0; 3 * 6];
    for i in 0..3 {
        data[i * 6 + 4] = i as f64;
        data[i * 6 + 5] = 10.0 * i as f64;
    }
    let mut tape = Tape::new();
    let qkv = tape.constant(&mat(3, 6, &data));
    let out = tape.attention(qkv, 3, 1, true).unwrap();
    assert_eq!(tape.value(out), &[0.0, 0.0, 0.5, 5.0, 1.0, 10.0]);
    let out = tape.attention(qkv, 3, 1, false).unwrap();
    assert_eq!(tape.value(out)[..2], [1.0, 10.0]);
}

#[test]
fn frozen_leaves_never_receive_gradients() {
    let mut tape = Tape::new();
    let w = tape.constant(&Tensor::ones(&[2, 2]));
    let x = tape.variable(&Tensor::ones(&[1, 2]));
    let y = tape.matmul(x, w).unwrap();
    let loss = tape.sum(y);
    let g = tape.backward(loss).unwrap();
    assert!(g.wrt(w).is_none());
    assert_eq!(g.wrt(x).unwrap(), &[2.0, 2.0]);
}

#[test]
fn backward_is_linear_and_replayable() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = random_tensor(&[2, 3], 1.0, &mut rng);
    let b = random_tensor(&[3, 3], 1.0, &mut rng);
    let mut tape = Tape::new();
    let av = tape.variable(&a);
    let bv = tape.variable(&b);
    let c = tape.matmul(av, bv).unwrap();
    let h = tape.gelu(c);
    let l1 = tape.sum(h);
    let sq = tape.square(c);
    let l2 = tape.mean(sq);
    let total = tape.add(l1, l2).unwrap();

    let g1 = tape.backward(l1).unwrap();
    let g2 = tape.backward(l2).unwrap();
    let gt = tape.backward(total).unwrap();
    for v in [av, bv] {
        for ((x, y), z) in g1.wrt(v).unwrap().iter().zip(g2.wrt(v).unwrap()).zip(gt.wrt(v).unwrap()) {
            assert!((x + y - z).abs() < 1e-12);
        }
    }
    let again = tape.backward(total).unwrap();
    assert_eq!(gt.wrt(av).unwrap(), again.wrt(av).unwrap());
    assert_eq!(gt.wrt(bv).unwrap(), again.wrt(bv).unwrap());
}

#[test]
fn every_reachable_variable_gets_a_gradient() {
    let mut tape = Tape::new();
    let x = tape.variable(&Tensor::ones(&[2, 2]));
    let unused = tape.variable(&Tensor::ones(&[3]));
    let y = tape.scale(x, 0.0);
    let loss = tape.sum(y);
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.wrt(x).unwrap(), &[0.0; 4]);
    assert!(g.wrt(unused).is_none());
}
