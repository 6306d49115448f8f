//! Calibration run: seed pretraining + one expert, with timing and
//! per-domain exact-match numbers. Used to pick training budgets.

use std::time::Instant;

use stitchkit_core::rng::Rng;
use stitchkit_model::lm::AnyModel;
use stitchkit_model::transformer::TransformerModel;
use stitchkit_model::ModelConfig;
use stitchkit_train::corpus::{gen_arith, gen_cipher, gen_code, gen_mixed, GenParams};
use stitchkit_train::eval::{evaluate, EvalConfig};
use stitchkit_train::sampler::MixtureSampler;
use stitchkit_train::schedule::TrainConfig;
use stitchkit_train::trainer::{train, TrainTarget};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let seed_steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(400);
    let expert_steps: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(200);
    let peak_lr: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(3e-3);

    let gp = GenParams::default();
    let t0 = Instant::now();
    let arith = gen_arith(&gp, 101).unwrap();
    let code = gen_code(&gp, 102).unwrap();
    let cipher = gen_cipher(&gp, 103).unwrap();
    let mixed = gen_mixed(
        &GenParams {
            n_train: 12_000,
            ..gp.clone()
        },
        104,
        &arith,
        &code,
        &cipher,
    )
    .unwrap();
    eprintln!("[{:6.1?}] corpora generated", t0.elapsed());

    let mcfg = ModelConfig::desk();
    let mut seed_model = TransformerModel::<f32>::init(&mcfg, &Rng::seeded(7)).unwrap();
    eprintln!("model params: {}", seed_model.actual_param_count());

    let tc = TrainConfig {
        peak_lr,
        warmup_steps: seed_steps / 10,
        total_steps: seed_steps,
        final_lr_fraction: 0.01,
        batch_tokens: 2048,
        seq_len: 128,
        weight_decay: 0.1,
        seed: 7,
        freeze_groups: vec![],
    };
    let mut sampler =
        MixtureSampler::new(&[(&mixed, 1.0)], tc.seq_len, Rng::seeded(tc.seed)).unwrap();
    let t1 = Instant::now();
    let stats = train(&mut TrainTarget::Dense(&mut seed_model), &mut sampler, &tc, None).unwrap();
    let dt = t1.elapsed().as_secs_f64();
    eprintln!(
        "[{:6.1?}] seed: {} steps in {:.1}s ({:.2} s/step, {:.0} tok/s), loss {:.3} -> {:.3}",
        t0.elapsed(),
        seed_steps,
        dt,
        dt / seed_steps as f64,
        (seed_steps * 2048) as f64 / dt,
        stats.initial_loss,
        stats.final_loss
    );
    for r in stats.records.iter().step_by((seed_steps / 8).max(1)) {
        eprintln!("  step {:4} loss {:.3}", r.step, r.loss);
    }

    let t2 = Instant::now();
    let eval_cfg = EvalConfig {
        max_prompts: 96,
        loss_windows: 16,
        seq_len: 128,
    };
    let seed_any = AnyModel::Dense(seed_model.clone());
    let report = evaluate(
        &seed_any,
        &[&arith, &code, &cipher, &mixed],
        &eval_cfg,
        "seed",
        "pilot",
    )
    .unwrap();
    eprintln!(
        "[{:6.1?}] seed eval in {:.1}s: macro {:.3}",
        t0.elapsed(),
        t2.elapsed().as_secs_f64(),
        report.macro_avg
    );
    for (d, m) in &report.domains {
        eprintln!(
            "  {d:<12} loss {:.3} tok-acc {:.3} EM {:.3}",
            m.loss, m.token_accuracy, m.exact_match
        );
    }

    // Expert: continued pretraining on arith only.
    let mut expert = seed_model.clone();
    let etc = TrainConfig {
        peak_lr: peak_lr / 2.0,
        warmup_steps: expert_steps / 10,
        total_steps: expert_steps,
        final_lr_fraction: 0.01,
        ..tc.clone()
    };
    let mut sampler =
        MixtureSampler::new(&[(&arith, 1.0)], etc.seq_len, Rng::seeded(11)).unwrap();
    let t3 = Instant::now();
    let stats = train(&mut TrainTarget::Dense(&mut expert), &mut sampler, &etc, None).unwrap();
    eprintln!(
        "[{:6.1?}] expert(arith): {} steps in {:.1}s, loss {:.3} -> {:.3}",
        t0.elapsed(),
        expert_steps,
        t3.elapsed().as_secs_f64(),
        stats.initial_loss,
        stats.final_loss
    );
    let expert_any = AnyModel::Dense(expert);
    let ereport = evaluate(
        &expert_any,
        &[&arith, &code, &cipher, &mixed],
        &eval_cfg,
        "expert-arith",
        "pilot",
    )
    .unwrap();
    eprintln!("expert-arith eval: macro {:.3}", ereport.macro_avg);
    for (d, m) in &ereport.domains {
        eprintln!(
            "  {d:<12} loss {:.3} tok-acc {:.3} EM {:.3}",
            m.loss, m.token_accuracy, m.exact_match
        );
    }
    eprintln!("[{:6.1?}] done", t0.elapsed());
}
