//! Training-loop contracts: overfit smoke test, deterministic replay,
//! the stitch freeze invariant, and error paths.

use stitchkit_core::rng::Rng;
use stitchkit_model::transformer::TransformerModel;
use stitchkit_model::{ModelConfig, StitchInit, StitchPattern, StitchedModel};
use stitchkit_train::corpus::{gen_arith, DomainCorpus, GenParams};
use stitchkit_train::sampler::MixtureSampler;
use stitchkit_train::schedule::TrainConfig;
use stitchkit_train::trainer::{train, TrainTarget};
use stitchkit_train::TrainError;

fn micro64(n_layers: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: 64,
        ..ModelConfig::micro(n_layers)
    }
}

fn tiny_corpus() -> DomainCorpus {
    gen_arith(
        &GenParams {
            n_train: 300,
            n_eval: 40,
            ..GenParams::default()
        },
        5,
    )
    .unwrap()
}

fn quick_cfg(steps: usize, seq_len: usize) -> TrainConfig {
    TrainConfig {
        peak_lr: 3e-3,
        warmup_steps: (steps / 4).min(10),
        total_steps: steps,
        final_lr_fraction: 0.1,
        batch_tokens: 8 * seq_len,
        seq_len,
        weight_decay: 0.1,
        seed: 7,
        freeze_groups: vec![],
    }
}

#[test]
fn model_memorizes_a_repeated_token() {
    // Constant-token corpus: loss must collapse below 0.05 quickly.
    let cfg = micro64(2);
    let mut model = TransformerModel::<f32>::init(&cfg, &Rng::seeded(1)).unwrap();
    let mut corpus = tiny_corpus();
    corpus.train = vec!["7".repeat(400)];
    let tc = quick_cfg(250, 16);
    let mut sampler = MixtureSampler::new(&[(&corpus, 1.0)], 16, Rng::seeded(7)).unwrap();
    let stats = train(
        &mut TrainTarget::Dense(&mut model),
        &mut sampler,
        &tc,
        None,
    )
    .unwrap();
    assert!(
        stats.final_loss < 0.05,
        "memorization loss {}",
        stats.final_loss
    );
}

#[test]
fn replay_with_same_seed_is_bit_identical() {
    let corpus = tiny_corpus();
    let run = || {
        let cfg = micro64(2);
        let mut model = TransformerModel::<f32>::init(&cfg, &Rng::seeded(3)).unwrap();
        let tc = quick_cfg(25, 32);
        let mut sampler =
            MixtureSampler::new(&[(&corpus, 1.0)], 32, Rng::seeded(tc.seed)).unwrap();
        let stats = train(&mut TrainTarget::Dense(&mut model), &mut sampler, &tc, None).unwrap();
        let losses: Vec<f64> = stats.records.iter().map(|r| r.loss).collect();
        (losses, model.tensor_hashes())
    };
    let (l1, h1) = run();
    let (l2, h2) = run();
    assert_eq!(l1, l2, "metric logs must replay bit-identically");
    assert_eq!(h1, h2, "final weights must replay bit-identically");
}

#[test]
fn stitch_training_never_touches_member_tensors() {
    let cfg = micro64(4);
    let hub = TransformerModel::<f32>::init(&cfg, &Rng::seeded(10)).unwrap();
    let experts = vec![
        TransformerModel::<f32>::init(&cfg, &Rng::seeded(11)).unwrap(),
        TransformerModel::<f32>::init(&cfg, &Rng::seeded(12)).unwrap(),
    ];
    let mut stitched = StitchedModel::build(
        hub,
        experts,
        2,
        StitchPattern::Alternating,
        StitchInit::HubIdentity,
        0.1,
    )
    .unwrap();
    let before = stitched.member_tensor_hashes();
    let stitch_before: Vec<_> = {
        let mut v = Vec::new();
        stitched.visit_stitch_params(&mut |n, p| v.push((n.to_string(), p.to_bytes())));
        v
    };

    let corpus = tiny_corpus();
    let tc = quick_cfg(12, 24);
    let mut sampler = MixtureSampler::new(&[(&corpus, 1.0)], 24, Rng::seeded(tc.seed)).unwrap();
    train(
        &mut TrainTarget::Stitched(&mut stitched),
        &mut sampler,
        &tc,
        None,
    )
    .unwrap();

    assert_eq!(
        stitched.member_tensor_hashes(),
        before,
        "member tensors changed during stitch training"
    );
    let mut stitch_changed = false;
    let mut i = 0;
    stitched.visit_stitch_params(&mut |_, p| {
        if p.to_bytes() != stitch_before[i].1 {
            stitch_changed = true;
        }
        i += 1;
    });
    assert!(stitch_changed, "stitch parameters never moved");
}

#[test]
fn freezing_everything_is_an_error() {
    let cfg = micro64(1);
    let mut model = TransformerModel::<f32>::init(&cfg, &Rng::seeded(2)).unwrap();
    let corpus = tiny_corpus();
    let mut tc = quick_cfg(5, 16);
    tc.freeze_groups = vec!["".to_string()]; // empty prefix matches all
    let mut sampler = MixtureSampler::new(&[(&corpus, 1.0)], 16, Rng::seeded(tc.seed)).unwrap();
    assert!(matches!(
        train(&mut TrainTarget::Dense(&mut model), &mut sampler, &tc, None),
        Err(TrainError::AllFrozen)
    ));
}

#[test]
fn nan_loss_aborts_with_op_name() {
    let cfg = micro64(1);
    let mut model = TransformerModel::<f32>::init(&cfg, &Rng::seeded(2)).unwrap();
    // Poison a weight so the forward pass produces non-finite values.
    model.final_norm.values_mut()[0] = f32::NAN;
    let corpus = tiny_corpus();
    let tc = quick_cfg(3, 16);
    let mut sampler = MixtureSampler::new(&[(&corpus, 1.0)], 16, Rng::seeded(tc.seed)).unwrap();
    match train(&mut TrainTarget::Dense(&mut model), &mut sampler, &tc, None) {
        Err(TrainError::NaNLoss { step, op }) => {
            assert_eq!(step, 0);
            assert!(!op.is_empty());
        }
        other => panic!("expected NaNLoss, got {other:?}"),
    }
}

#[test]
fn metric_log_is_written_as_jsonl() {
    let tmp = tempfile::tempdir().unwrap();
    let log = tmp.path().join("metrics.jsonl");
    let cfg = micro64(1);
    let mut model = TransformerModel::<f32>::init(&cfg, &Rng::seeded(2)).unwrap();
    let corpus = tiny_corpus();
    let tc = quick_cfg(8, 16);
    let mut sampler = MixtureSampler::new(&[(&corpus, 1.0)], 16, Rng::seeded(tc.seed)).unwrap();
    train(
        &mut TrainTarget::Dense(&mut model),
        &mut sampler,
        &tc,
        Some(&log),
    )
    .unwrap();
    let text = std::fs::read_to_string(&log).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 8);
    for (i, line) in lines.iter().enumerate() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["step"].as_u64(), Some(i as u64 + 1));
        assert!(v["loss"].as_f64().is_some());
        assert!(v["lr"].as_f64().is_some());
        assert!(v["tokens_seen"].as_u64().is_some());
    }
}
