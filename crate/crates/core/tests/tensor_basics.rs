//! Contract tests for the tensor ops: worked examples, error paths,
//! determinism, and the parallel-equals-serial guarantee.

use proptest::prelude::*;
use stitchkit_core::rng::Rng;
use stitchkit_core::tape::Tape;
use stitchkit_core::tensor::PTensor;
use stitchkit_core::{set_parallel, CoreError};

fn tensor_f64(shape: &[usize], data: Vec<f64>) -> PTensor<f64> {
    PTensor::from_vec(shape, data)
}

/// Independent triple-loop matmul oracle.
fn matmul_oracle(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[p * n + j];
            }
            c[i * n + j] = s;
        }
    }
    c
}

#[test]
fn matmul_identity() {
    let mut t = Tape::<f64>::new(false);
    let i = t.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
    let b = t.constant(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]);
    let y = t.matmul(i, b).unwrap();
    assert_eq!(t.value(y), &[3.0, 4.0, 5.0, 6.0]);
}

#[test]
fn matmul_dot_product() {
    let mut t = Tape::<f64>::new(false);
    let a = t.constant(vec![1, 2], vec![1.0, 2.0]);
    let b = t.constant(vec![2, 1], vec![3.0, 4.0]);
    let y = t.matmul(a, b).unwrap();
    assert_eq!(t.value(y), &[11.0]);
}

#[test]
fn matmul_matches_triple_loop_oracle() {
    let mut rng = Rng::seeded(3).stream("mm");
    let (m, k, n) = (4, 5, 3);
    let a: Vec<f64> = (0..m * k).map(|_| rng.normal()).collect();
    let b: Vec<f64> = (0..k * n).map(|_| rng.normal()).collect();
    let want = matmul_oracle(&a, &b, m, k, n);
    let mut t = Tape::<f64>::new(false);
    let an = t.constant(vec![m, k], a);
    let bn = t.constant(vec![k, n], b);
    let y = t.matmul(an, bn).unwrap();
    let got = t.value(y);
    let max_diff = got
        .iter()
        .zip(&want)
        .map(|(g, w)| (g - w).abs())
        .fold(0.0, f64::max);
    assert!(max_diff < 1e-6, "max diff {max_diff}");
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut t = Tape::<f64>::new(false);
    let a = t.constant(vec![2, 3], vec![0.0; 6]);
    let b = t.constant(vec![2, 2], vec![0.0; 4]);
    let err = t.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
}

#[test]
fn softmax_uniform_and_stabilized() {
    let mut t = Tape::<f64>::new(false);
    let x = t.constant(vec![4], vec![0.0; 4]);
    let y = t.softmax(x, 0).unwrap();
    for &v in t.value(y) {
        assert!((v - 0.25).abs() < 1e-12);
    }
    let big = t.constant(vec![2], vec![1000.0, 0.0]);
    let y = t.softmax(big, 0).unwrap();
    let v = t.value(y);
    assert!(v.iter().all(|x| x.is_finite()));
    assert!((v[0] - 1.0).abs() < 1e-6 && v[1].abs() < 1e-6);
}

#[test]
fn softmax_sums_to_one_in_f64() {
    let mut rng = Rng::seeded(4).stream("sm");
    let data: Vec<f64> = (0..8).map(|_| rng.normal() * 3.0).collect();
    let mut t = Tape::<f64>::new(false);
    let x = t.constant(vec![8], data);
    let y = t.softmax(x, 0).unwrap();
    let sum: f64 = t.value(y).iter().sum();
    assert!((sum - 1.0).abs() < 1e-9, "sum {sum}");
}

#[test]
fn sigmoid_examples() {
    let mut t = Tape::<f64>::new(false);
    let x = t.constant(vec![3], vec![0.0, -6.9068, 1e4]);
    let y = t.sigmoid(x);
    let v = t.value(y);
    assert_eq!(v[0], 0.5);
    assert!((v[1] - 0.001).abs() < 1e-5, "{}", v[1]);
    assert_eq!(v[2], 1.0);
    assert!(v.iter().all(|x| x.is_finite()));
}

#[test]
fn dropout_contracts() {
    let mut rng = Rng::seeded(5).stream("do");
    let mut t = Tape::<f32>::new(false);
    let x = t.constant(vec![4], vec![1.0, 2.0, 3.0, 4.0]);

    // rate=0 and eval mode are exact identities (same node, no copy).
    assert_eq!(t.dropout(x, 0.0, true, &mut rng).unwrap(), x);
    assert_eq!(t.dropout(x, 0.7, false, &mut rng).unwrap(), x);

    // invalid rates
    assert!(matches!(
        t.dropout(x, 1.0, true, &mut rng),
        Err(CoreError::InvalidRate { .. })
    ));
    assert!(matches!(
        t.dropout(x, -0.1, true, &mut rng),
        Err(CoreError::InvalidRate { .. })
    ));

    // law of large numbers at rate 0.5 over 1e5 ones, fixed seed
    let n = 100_000;
    let ones = t.constant(vec![n], vec![1.0f32; n]);
    let mut drng = Rng::seeded(7).stream("dropout");
    let d = t.dropout(ones, 0.5, true, &mut drng).unwrap();
    let mean: f32 = t.value(d).iter().sum::<f32>() / n as f32;
    assert!((0.98..=1.02).contains(&mean), "mean {mean}");
}

#[test]
fn backward_of_sum_is_ones() {
    let mut t = Tape::<f64>::new(true);
    let p = tensor_f64(&[2, 3], vec![0.5, -1.0, 2.0, 3.0, -0.25, 0.0]);
    let x = t.leaf(&p);
    let loss = t.sum_all(x);
    let grads = t.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap(), &[1.0; 6]);
}

#[test]
fn backward_of_sum_of_squares() {
    let mut t = Tape::<f64>::new(true);
    let p = tensor_f64(&[3], vec![1.0, 2.0, 3.0]);
    let x = t.leaf(&p);
    let sq = t.mul(x, x).unwrap();
    let loss = t.sum_all(sq);
    let grads = t.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap(), &[2.0, 4.0, 6.0]);
}

#[test]
fn backward_requires_scalar_loss() {
    let mut t = Tape::<f64>::new(true);
    let p = tensor_f64(&[2], vec![1.0, 2.0]);
    let x = t.leaf(&p);
    assert!(matches!(
        t.backward(x),
        Err(CoreError::NonScalarLoss { .. })
    ));
}

#[test]
fn frozen_leaves_receive_no_gradient() {
    let mut t = Tape::<f64>::new(true);
    let trainable = tensor_f64(&[2], vec![1.0, 2.0]);
    let frozen = tensor_f64(&[2], vec![3.0, 4.0]).frozen();
    let a = t.leaf(&trainable);
    let b = t.leaf(&frozen);
    let m = t.mul(a, b).unwrap();
    let loss = t.sum_all(m);
    let grads = t.backward(loss).unwrap();
    assert_eq!(grads.get(a).unwrap(), &[3.0, 4.0]);
    assert!(grads.get(b).is_none());
}

#[test]
fn parallel_gemm_is_bit_identical_to_serial() {
    let mut rng = Rng::seeded(8).stream("par");
    let (m, k, n) = (256, 64, 96);
    let a: Vec<f32> = (0..m * k).map(|_| rng.normal() as f32).collect();
    let b: Vec<f32> = (0..k * n).map(|_| rng.normal() as f32).collect();

    let run = |par: bool| -> Vec<f32> {
        set_parallel(par);
        let mut t = Tape::<f32>::new(false);
        let an = t.constant(vec![m, k], a.clone());
        let bn = t.constant(vec![k, n], b.clone());
        let y = t.matmul(an, bn).unwrap();
        t.value(y).to_vec()
    };
    let serial = run(false);
    let parallel = run(true);
    set_parallel(true);
    assert_eq!(serial, parallel, "parallel gemm diverged from serial order");
}

#[test]
fn parallel_attention_is_bit_identical_to_serial() {
    let mut rng = Rng::seeded(9).stream("par");
    let (b, t_len, h, hd) = (4, 16, 4, 8);
    let q: Vec<f32> = (0..b * t_len * h * hd).map(|_| rng.normal() as f32).collect();
    let k: Vec<f32> = (0..b * t_len * hd).map(|_| rng.normal() as f32).collect();
    let v: Vec<f32> = (0..b * t_len * hd).map(|_| rng.normal() as f32).collect();

    let run = |par: bool| -> Vec<f32> {
        set_parallel(par);
        let mut t = Tape::<f32>::new(false);
        let qn = t.constant(vec![b, t_len, h, hd], q.clone());
        let kn = t.constant(vec![b, t_len, 1, hd], k.clone());
        let vn = t.constant(vec![b, t_len, 1, hd], v.clone());
        let p = t.attn_probs(qn, kn, 0.35).unwrap();
        let y = t.attn_apply(p, vn).unwrap();
        t.value(y).to_vec()
    };
    let serial = run(false);
    let parallel = run(true);
    set_parallel(true);
    assert_eq!(serial, parallel);
}

#[test]
fn init_is_deterministic_across_runs() {
    let a = PTensor::<f32>::randn(&[32], 0.02, &mut Rng::seeded(7).stream("init"));
    let b = PTensor::<f32>::randn(&[32], 0.02, &mut Rng::seeded(7).stream("init"));
    assert_eq!(*a.data, *b.data);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(
        rows in 1usize..5,
        lane in 1usize..9,
        seed in 0u64..1000,
    ) {
        let mut rng = Rng::seeded(seed).stream("p");
        let data: Vec<f64> = (0..rows * lane).map(|_| rng.normal() * 5.0).collect();
        let mut t = Tape::<f64>::new(false);
        let x = t.constant(vec![rows, lane], data);
        let y = t.softmax(x, 1).unwrap();
        let v = t.value(y);
        for r in 0..rows {
            let s: f64 = v[r * lane..(r + 1) * lane].iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
            prop_assert!(v[r * lane..(r + 1) * lane].iter().all(|&p| p > 0.0 && p < 1.0 + 1e-12));
        }
    }

    #[test]
    fn matmul_agrees_with_oracle(
        m in 1usize..5, k in 1usize..6, n in 1usize..5, seed in 0u64..1000,
    ) {
        let mut rng = Rng::seeded(seed).stream("p2");
        let a: Vec<f64> = (0..m * k).map(|_| rng.normal()).collect();
        let b: Vec<f64> = (0..k * n).map(|_| rng.normal()).collect();
        let want = matmul_oracle(&a, &b, m, k, n);
        let mut t = Tape::<f64>::new(false);
        let an = t.constant(vec![m, k], a);
        let bn = t.constant(vec![k, n], b);
        let y = t.matmul(an, bn).unwrap();
        for (g, w) in t.value(y).iter().zip(&want) {
            prop_assert!((g - w).abs() < 1e-6);
        }
    }
}
