//! Identity and oracle tests for the merging/upcycling baselines: soup,
//! BTM ensembling, sequence routing, and the soft-routing MoE.

use stitchkit_core::ckpt::{Ckpt, CkptWriter};
use stitchkit_core::rng::Rng;
use stitchkit_core::tape::Tape;
use stitchkit_core::tensor::PTensor;
use stitchkit_model::lm::assert_distribution;
use stitchkit_model::merge::{
    model_soup, train_sequence_router, BtmEnsemble, RouterTrainConfig,
};
use stitchkit_model::moe::{upcycle_moe, UpAttn};
use stitchkit_model::transformer::TransformerModel;
use stitchkit_model::{ModelConfig, ModelError};

fn write_ckpt(dir: &std::path::Path, tensors: &[(&str, PTensor<f32>)]) -> Ckpt {
    let mut w = CkptWriter::new("dense", "test");
    w.config = serde_json::json!({"d": 2});
    for (name, t) in tensors {
        w.add_tensor(name, t);
    }
    w.write(dir).unwrap();
    Ckpt::open(dir).unwrap()
}

#[test]
fn soup_of_identical_checkpoints_is_the_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let w = PTensor::from_vec(&[2, 2], vec![0.5f32, -1.25, 3.0, 0.0]);
    let a = write_ckpt(&tmp.path().join("a"), &[("w", w.clone())]);
    let b = write_ckpt(&tmp.path().join("b"), &[("w", w.clone())]);
    let c = write_ckpt(&tmp.path().join("c"), &[("w", w.clone())]);
    let (avg, _) = model_soup::<f32>(&[&a, &b, &c]).unwrap();
    // k identical inputs, fixed summation order: exact equality.
    assert_eq!(*avg[0].1.data, *w.data);
}

#[test]
fn soup_of_w_and_minus_w_is_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let mut rng = Rng::seeded(2).stream("s");
    let w = PTensor::<f32>::randn(&[3, 3], 1.0, &mut rng);
    let mut neg = w.clone();
    for v in neg.values_mut() {
        *v = -*v;
    }
    let a = write_ckpt(&tmp.path().join("a"), &[("w", w)]);
    let b = write_ckpt(&tmp.path().join("b"), &[("w", neg)]);
    let (avg, _) = model_soup::<f32>(&[&a, &b]).unwrap();
    assert!(avg[0].1.data.iter().all(|&v| v == 0.0));
}

#[test]
fn soup_matches_hand_computed_means_and_is_permutation_invariant() {
    let tmp = tempfile::tempdir().unwrap();
    let wa = PTensor::from_vec(&[2], vec![1.0f32, 5.0]);
    let ba = PTensor::from_vec(&[1], vec![2.0f32]);
    let wb = PTensor::from_vec(&[2], vec![3.0f32, -1.0]);
    let bb = PTensor::from_vec(&[1], vec![4.0f32]);
    let a = write_ckpt(&tmp.path().join("a"), &[("w", wa), ("b", ba)]);
    let b = write_ckpt(&tmp.path().join("b"), &[("w", wb), ("b", bb)]);
    let (avg1, _) = model_soup::<f32>(&[&a, &b]).unwrap();
    let (avg2, _) = model_soup::<f32>(&[&b, &a]).unwrap();
    assert_eq!(*avg1[0].1.data, vec![2.0f32, 2.0]);
    assert_eq!(*avg1[1].1.data, vec![3.0f32]);
    for (x, y) in avg1.iter().zip(&avg2) {
        assert_eq!(*x.1.data, *y.1.data, "soup must be order-invariant");
    }
}

#[test]
fn soup_rejects_mismatched_tensor_sets() {
    let tmp = tempfile::tempdir().unwrap();
    let a = write_ckpt(
        &tmp.path().join("a"),
        &[("w", PTensor::from_vec(&[1], vec![1.0f32]))],
    );
    let b = write_ckpt(
        &tmp.path().join("b"),
        &[("x", PTensor::from_vec(&[1], vec![1.0f32]))],
    );
    assert!(matches!(
        model_soup::<f32>(&[&a, &b]),
        Err(ModelError::IncompatibleCheckpoints(_))
    ));
}

fn members(n: usize, seed: u64) -> Vec<TransformerModel<f32>> {
    let cfg = ModelConfig::micro(2);
    (0..n)
        .map(|i| TransformerModel::init(&cfg, &Rng::seeded(seed + i as u64)).unwrap())
        .collect()
}

#[test]
fn btm_over_identical_members_equals_the_member() {
    let cfg = ModelConfig::micro(2);
    let m = TransformerModel::<f32>::init(&cfg, &Rng::seeded(42)).unwrap();
    let ens = BtmEnsemble::new(vec![m.clone(), m.clone(), m.clone()]).unwrap();
    let context = vec![3u32, 7, 1, 9];
    let dist = ens.next_dist(&context).unwrap();

    let mut tape = Tape::<f32>::new(false);
    let mut rng = Rng::seeded(0);
    let logits = m.logits(&mut tape, &context, 1, 4, false, &mut rng).unwrap();
    let v = cfg.vocab_size;
    let last = &tape.value(logits)[3 * v..4 * v];
    let want = stitchkit_model::lm::next_probs(last);
    for (g, w) in dist.iter().zip(&want) {
        assert!((g - w).abs() < 1e-5, "{g} vs {w}");
    }
    assert!(assert_distribution(&dist, 1e-6));
}

#[test]
fn btm_weights_follow_context_likelihood() {
    // softmax(-1, -5): weights ~ [0.982, 0.018]
    let w = BtmEnsemble::<f32>::weights_from_logliks(&[-1.0, -5.0]);
    assert!((w[0] - 0.982).abs() < 5e-4, "{:?}", w);
    assert!((w[1] - 0.018).abs() < 5e-4);
    // Empty context: uniform.
    let u = BtmEnsemble::<f32>::weights_from_logliks(&[0.0, 0.0, 0.0]);
    for v in u {
        assert!((v - 1.0 / 3.0).abs() < 1e-12);
    }
}

#[test]
fn btm_distribution_sums_to_one() {
    let ms = members(2, 100);
    let ens = BtmEnsemble::new(ms).unwrap();
    let dist = ens.next_dist(&[1, 2, 3]).unwrap();
    assert!(assert_distribution(&dist, 1e-6));
}

#[test]
fn router_labels_are_argmin_and_separable_toy_routes_correctly() {
    // Two "domains" with disjoint token ranges, two members where each is
    // clearly better on one domain: train sequences labeled by smallest
    // next-token loss, then held-out routing accuracy must exceed 90%.
    let cfg = ModelConfig::micro(1);
    let mut a = TransformerModel::<f32>::init(&cfg, &Rng::seeded(7)).unwrap();
    let mut b = TransformerModel::<f32>::init(&cfg, &Rng::seeded(8)).unwrap();
    // Domain 0 uses tokens 0..8, domain 1 uses 8..16. Zero the blocks so
    // the residual is the embedding, then point each member's head at its
    // own domain's embedding rows: that member assigns those tokens much
    // higher probability, so its loss on that domain is strictly smaller.
    let v = cfg.vocab_size;
    let d = cfg.d_model;
    // Shared embedding with a constant positive channel 0, so a head row
    // pinned at channel 0 yields the same positive logit for every input.
    let mut shared_embed = a.embed.clone();
    {
        let vals = shared_embed.values_mut();
        for tok in 0..v {
            vals[tok * d] = 1.0;
        }
    }
    for (m, lo, hi) in [(&mut a, 0usize, 8usize), (&mut b, 8, 16)] {
        m.embed = shared_embed.clone();
        for blk in &mut m.layers {
            for w in [&mut blk.wq, &mut blk.wk, &mut blk.wv, &mut blk.wo] {
                w.values_mut().fill(0.0);
            }
            for w in [&mut blk.w_gate, &mut blk.w_up, &mut blk.w_down] {
                w.values_mut().fill(0.0);
            }
        }
        let head = m.head.values_mut();
        head.fill(0.0);
        for tok in lo..hi {
            head[tok] = 50.0; // channel 0 row
        }
    }
    let mut rng = Rng::seeded(9).stream("toy");
    let gen_seq = |domain: usize, rng: &mut Rng| -> Vec<u32> {
        (0..12)
            .map(|_| rng.below(8) as u32 + if domain == 0 { 0 } else { 8 })
            .collect()
    };
    let train_seqs: Vec<Vec<u32>> = (0..64)
        .map(|i| gen_seq(i % 2, &mut rng))
        .collect();
    let router = train_sequence_router(
        &[&a, &b],
        &train_seqs,
        &RouterTrainConfig {
            t_min: 4,
            t_max: 8,
            lr: 5e-3,
            steps: 200,
        },
        &Rng::seeded(10),
    )
    .unwrap();

    // Label sanity: a domain-0 sequence has smaller loss under member a.
    let nll_a =
        stitchkit_model::merge::member_sequence_nlls(&a, &train_seqs[..2].to_vec()).unwrap();
    let nll_b =
        stitchkit_model::merge::member_sequence_nlls(&b, &train_seqs[..2].to_vec()).unwrap();
    assert!(nll_a[0] < nll_b[0], "domain-0 belongs to member a");
    assert!(nll_b[1] < nll_a[1], "domain-1 belongs to member b");

    let mut correct = 0;
    let held_out = 64;
    for i in 0..held_out {
        let domain = i % 2;
        let seq = gen_seq(domain, &mut rng);
        if router.route(&a.embed, &seq) == domain {
            correct += 1;
        }
    }
    let acc = correct as f64 / held_out as f64;
    assert!(acc > 0.9, "held-out routing accuracy {acc}");
}

#[test]
fn single_member_router_is_degenerate() {
    let ms = members(1, 50);
    let router = train_sequence_router(
        &[&ms[0]],
        &[],
        &RouterTrainConfig::default(),
        &Rng::seeded(1),
    )
    .unwrap();
    assert_eq!(router.route(&ms[0].embed, &[1, 2, 3]), 0);
}

#[test]
fn router_requires_enough_sequences() {
    let ms = members(2, 60);
    let err = train_sequence_router(
        &[&ms[0], &ms[1]],
        &[vec![1, 2, 3]],
        &RouterTrainConfig::default(),
        &Rng::seeded(1),
    )
    .unwrap_err();
    assert!(matches!(err, ModelError::InsufficientData(_)));
}

// ---- MoE upcycling ----

#[test]
fn soft_moe_with_identical_members_equals_single_model() {
    let cfg = ModelConfig::micro(2);
    let m = TransformerModel::<f32>::init(&cfg, &Rng::seeded(70)).unwrap();
    let up = upcycle_moe(&[&m, &m, &m], false, false, false, None).unwrap();
    let tokens = vec![1u32, 5, 9, 3];
    let mut tape = Tape::<f32>::new(false);
    let got_id = up.logits(&mut tape, &tokens, 1, 4).unwrap();
    let got = tape.value(got_id).to_vec();
    let mut tape = Tape::<f32>::new(false);
    let mut rng = Rng::seeded(0);
    let want_id = m.logits(&mut tape, &tokens, 1, 4, false, &mut rng).unwrap();
    let want = tape.value(want_id);
    let max = got
        .iter()
        .zip(want)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    assert!(max < 1e-5, "max diff {max}");
}

#[test]
fn one_hot_router_with_identity_adapters_selects_the_expert() {
    let ms = members(3, 80);
    let refs: Vec<&TransformerModel<f32>> = ms.iter().collect();
    let mut up = upcycle_moe(&refs, false, true, true, None).unwrap();
    // Force every router to one-hot on expert 1 via its bias.
    for l in &mut up.layers {
        let bias = l.moe.router_bias.values_mut();
        bias.fill(-1e4);
        bias[1] = 1e4;
    }
    let tokens = vec![2u32, 7, 11];
    let mut tape = Tape::<f32>::new(false);
    let got_id = up.logits(&mut tape, &tokens, 1, 3).unwrap();
    let got = tape.value(got_id).to_vec();

    // Reference: dense model with expert 1's FFN but averaged everything
    // else (attention, norms, embedding, head are averaged in upcycling).
    let mut reference = ms[0].clone();
    let n = ms.len() as f32;
    reference.visit_params_mut(&mut |name, p| {
        let vals = p.values_mut();
        if name.contains("w_gate") || name.contains("w_up") || name.contains("w_down") {
            // expert 1's FFN
            let mut k = 0;
            ms[1].visit_params(&mut |n2, p2| {
                if n2 == name {
                    vals.copy_from_slice(&p2.data);
                }
                k += 1;
            });
            let _ = k;
        } else {
            // average of members
            let mut sum = vec![0.0f32; vals.len()];
            for m in &ms {
                m.visit_params(&mut |n2, p2| {
                    if n2 == name {
                        for (s, &x) in sum.iter_mut().zip(p2.data.iter()) {
                            *s += x;
                        }
                    }
                });
            }
            for (v, s) in vals.iter_mut().zip(&sum) {
                *v = s / n;
            }
        }
    });
    let mut tape = Tape::<f32>::new(false);
    let mut rng = Rng::seeded(0);
    let want_id = reference
        .logits(&mut tape, &tokens, 1, 3, false, &mut rng)
        .unwrap();
    let want = tape.value(want_id);
    let max = got
        .iter()
        .zip(want)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    assert!(max < 1e-5, "max diff {max}");
}

#[test]
fn soft_moe_layer_matches_weighted_sum_oracle() {
    // One layer's MoE output against an explicit sum_i p_i * FFN_i(x)
    // computed with scalar loops in f64.
    let cfg = ModelConfig::micro(1);
    let (d, f) = (cfg.d_model, cfg.d_ffn);
    let ms: Vec<TransformerModel<f64>> = (0..3)
        .map(|i| TransformerModel::init(&cfg, &Rng::seeded(90 + i)).unwrap())
        .collect();
    let refs: Vec<&TransformerModel<f64>> = ms.iter().collect();
    let mut up = upcycle_moe(&refs, false, false, false, None).unwrap();
    let mut rng = Rng::seeded(95).stream("r");
    for l in &mut up.layers {
        let shape = l.moe.router.shape.clone();
        l.moe.router = PTensor::randn(&shape, 0.8, &mut rng);
        let bshape = l.moe.router_bias.shape.clone();
        l.moe.router_bias = PTensor::randn(&bshape, 0.8, &mut rng);
    }

    let rows = 5;
    let x: Vec<f64> = (0..rows * d).map(|_| rng.normal()).collect();

    // Implementation route: routing + mix on the tape over the raw input.
    let mut tape = Tape::<f64>::new(false);
    let xn = tape.constant(vec![1, rows, d], x.clone());
    let l = &up.layers[0];
    let r = tape.leaf(&l.moe.router);
    let rb = tape.leaf(&l.moe.router_bias);
    let z = tape.matmul(xn, r).unwrap();
    let z = tape.add_bias(z, rb).unwrap();
    let p = tape.softmax(z, 2).unwrap();
    let mut outs = Vec::new();
    for fx in &l.moe.ffns {
        let (wg, wu, wd) = (
            tape.leaf(&fx.w_gate),
            tape.leaf(&fx.w_up),
            tape.leaf(&fx.w_down),
        );
        let g = tape.matmul(xn, wg).unwrap();
        let u = tape.matmul(xn, wu).unwrap();
        let g = tape.silu(g);
        let gu = tape.mul(g, u).unwrap();
        outs.push(tape.matmul(gu, wd).unwrap());
    }
    let mut acc = None;
    for (i, &o) in outs.iter().enumerate() {
        let col = tape.slice(p, 2, i, 1).unwrap();
        let col = tape.reshape(col, &[1, rows]).unwrap();
        let term = tape.row_scale(o, col).unwrap();
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term).unwrap(),
        });
    }
    let got = tape.value(acc.unwrap()).to_vec();

    // Oracle route: plain loops.
    let sigmoid = |x: f64| 1.0 / (1.0 + (-x).exp());
    let mut want = vec![0.0f64; rows * d];
    for row in 0..rows {
        let xr = &x[row * d..(row + 1) * d];
        // router softmax
        let m = l.moe.ffns.len();
        let mut z = vec![0.0f64; m];
        for (j, zj) in z.iter_mut().enumerate() {
            *zj = l.moe.router_bias.data[j];
            for c in 0..d {
                *zj += xr[c] * l.moe.router.data[c * m + j];
            }
        }
        let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = z.iter().map(|v| (v - mx).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let probs: Vec<f64> = exps.iter().map(|e| e / sum).collect();
        for (i, fx) in l.moe.ffns.iter().enumerate() {
            // FFN_i(x) with scalar loops
            let mut out = vec![0.0f64; d];
            let mut gate = vec![0.0f64; f];
            let mut upv = vec![0.0f64; f];
            for j in 0..f {
                for c in 0..d {
                    gate[j] += xr[c] * fx.w_gate.data[c * f + j];
                    upv[j] += xr[c] * fx.w_up.data[c * f + j];
                }
                gate[j] = gate[j] * sigmoid(gate[j]) * upv[j];
            }
            for c in 0..d {
                for j in 0..f {
                    out[c] += gate[j] * fx.w_down.data[j * d + c];
                }
            }
            for c in 0..d {
                want[row * d + c] += probs[i] * out[c];
            }
        }
    }
    let max = got
        .iter()
        .zip(&want)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    assert!(max < 1e-6, "max diff {max}");
}

#[test]
fn top_k_routing_renormalizes_over_selected_experts() {
    let ms = members(4, 120);
    let refs: Vec<&TransformerModel<f32>> = ms.iter().collect();
    let mut up = upcycle_moe(&refs, false, false, false, Some(2)).unwrap();
    let mut rng = Rng::seeded(121).stream("r");
    for l in &mut up.layers {
        let shape = l.moe.router.shape.clone();
        l.moe.router = PTensor::randn(&shape, 1.0, &mut rng);
    }
    // Forward runs without error and produces finite logits.
    let tokens = vec![1u32, 2, 3, 4, 5];
    let mut tape = Tape::<f32>::new(false);
    let id = up.logits(&mut tape, &tokens, 1, 5).unwrap();
    assert!(tape.value(id).iter().all(|v| v.is_finite()));
}

#[test]
fn bam_with_adapters_freezes_members() {
    let ms = members(3, 130);
    let refs: Vec<&TransformerModel<f32>> = ms.iter().collect();
    let up = upcycle_moe(&refs, true, true, true, None).unwrap();
    assert!(up.with_attention);
    let mut trainable = Vec::new();
    let mut frozen_experts = 0usize;
    up.visit_params(&mut |name, p| {
        if p.trainable {
            trainable.push(name.to_string());
        } else if name.contains(".experts.") {
            frozen_experts += 1;
        }
    });
    assert!(trainable
        .iter()
        .all(|n| n.contains("router") || n.contains("adapter")));
    assert!(!trainable.is_empty());
    // 3 members x (4 attn + 3 ffn tensors) per layer
    assert_eq!(frozen_experts, ms[0].config.n_layers * 3 * 7);
    for l in &up.layers {
        assert!(matches!(l.attn, UpAttn::Moa(_)));
    }
}
