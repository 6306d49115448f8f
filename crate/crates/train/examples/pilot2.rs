//! End-to-end calibration: seed -> 3 experts -> BTS stitch -> baselines,
//! with timing and the trend metrics the acceptance gate cares about.

use std::time::Instant;

use stitchkit_core::rng::Rng;
use stitchkit_model::lm::{AnyModel, RoutedEnsemble};
use stitchkit_model::merge::{train_sequence_router, BtmEnsemble, RouterTrainConfig};
use stitchkit_model::transformer::TransformerModel;
use stitchkit_model::{ModelConfig, StitchInit, StitchPattern, StitchedModel};
use stitchkit_train::corpus::{gen_arith, gen_cipher, gen_code, gen_mixed, Domain, GenParams};
use stitchkit_train::eval::{evaluate, EvalConfig, EvalReport};
use stitchkit_train::sampler::MixtureSampler;
use stitchkit_train::schedule::TrainConfig;
use stitchkit_train::trace::{context_switch_probe, trace_gates};
use stitchkit_train::trainer::{train, TrainTarget};

fn arg(n: usize, default: f64) -> f64 {
    std::env::args()
        .nth(n)
        .and_then(|s| s.parse().ok())
        .unwrap_or(default)
}

fn main() {
    let seed_steps = arg(1, 1400.0) as usize;
    let expert_steps = arg(2, 600.0) as usize;
    let stitch_steps = arg(3, 400.0) as usize;
    let stitch_lr = arg(4, 2e-3);
    let t0 = Instant::now();
    let say = |msg: String| eprintln!("[{:7.1?}] {msg}", t0.elapsed());

    let gp = GenParams::default();
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
    let domains = [&arith, &code, &cipher, &mixed];
    say("corpora ready".into());

    let mcfg = ModelConfig::desk();
    let mut seed_model = TransformerModel::<f32>::init(&mcfg, &Rng::seeded(7)).unwrap();
    let tc = TrainConfig {
        peak_lr: 4e-3,
        warmup_steps: seed_steps / 10,
        total_steps: seed_steps,
        final_lr_fraction: 0.01,
        batch_tokens: 2048,
        seq_len: 128,
        weight_decay: 0.1,
        seed: 7,
        freeze_groups: vec![],
    };
    let mut s = MixtureSampler::new(&[(&mixed, 1.0)], 128, Rng::seeded(7)).unwrap();
    let st = train(&mut TrainTarget::Dense(&mut seed_model), &mut s, &tc, None).unwrap();
    say(format!("seed trained: loss {:.3}", st.final_loss));

    // Experts.
    let ecfg = |steps: usize, lr: f64, seed: u64| TrainConfig {
        peak_lr: lr,
        warmup_steps: steps / 10,
        total_steps: steps,
        final_lr_fraction: 0.01,
        seed,
        ..tc.clone()
    };
    let mut experts = Vec::new();
    for (i, corp) in [&arith, &code, &cipher].iter().enumerate() {
        let mut e = seed_model.clone();
        let cfg = ecfg(expert_steps, 2e-3, 20 + i as u64);
        let mut s = MixtureSampler::new(&[(*corp, 1.0)], 128, Rng::seeded(cfg.seed)).unwrap();
        let stats = train(&mut TrainTarget::Dense(&mut e), &mut s, &cfg, None).unwrap();
        say(format!(
            "expert {} trained: loss {:.3}",
            corp.domain.as_str(),
            stats.final_loss
        ));
        experts.push(e);
    }

    // BTS stitch.
    let mut stitched = StitchedModel::build(
        seed_model.clone(),
        experts.clone(),
        4,
        StitchPattern::Alternating,
        StitchInit::HubIdentity,
        0.1,
    )
    .unwrap();
    say(format!(
        "stitched: positions {:?}, trainable {}",
        stitched.info.positions,
        stitched.trainable_param_count()
    ));
    let scfg = ecfg(stitch_steps, stitch_lr, 33);
    let mut s = MixtureSampler::new(
        &[(&arith, 0.15), (&code, 0.15), (&cipher, 0.15), (&mixed, 0.55)],
        128,
        Rng::seeded(scfg.seed),
    )
    .unwrap();
    let t_st = Instant::now();
    let stats = train(&mut TrainTarget::Stitched(&mut stitched), &mut s, &scfg, None).unwrap();
    say(format!(
        "stitch trained: {} steps in {:.1}s ({:.2} s/step), loss {:.3} -> {:.3}",
        stitch_steps,
        t_st.elapsed().as_secs_f64(),
        t_st.elapsed().as_secs_f64() / stitch_steps as f64,
        stats.initial_loss,
        stats.final_loss
    ));

    // Router + BTM + soup-equivalent (weight mean in memory).
    let router_seqs: Vec<Vec<u32>> = {
        let mut s = MixtureSampler::new(
            &[(&arith, 1.0), (&code, 1.0), (&cipher, 1.0), (&mixed, 1.0)],
            64,
            Rng::seeded(55),
        )
        .unwrap();
        (0..256).map(|_| s.next_batch(1)).collect()
    };
    let member_refs: Vec<&TransformerModel<f32>> =
        std::iter::once(&seed_model).chain(experts.iter()).collect();
    let t_r = Instant::now();
    let router = train_sequence_router(
        &member_refs,
        &router_seqs,
        &RouterTrainConfig::default(),
        &Rng::seeded(56),
    )
    .unwrap();
    say(format!("router trained in {:.1}s", t_r.elapsed().as_secs_f64()));

    let mut soup = seed_model.clone();
    soup.visit_params_mut(&mut |name, p| {
        let mut acc: Vec<f64> = p.data.iter().map(|&v| v as f64).collect();
        for e in &experts {
            e.visit_params(&mut |n2, p2| {
                if n2 == name {
                    for (a, &v) in acc.iter_mut().zip(p2.data.iter()) {
                        *a += v as f64;
                    }
                }
            });
        }
        let k = 1 + experts.len();
        for (slot, a) in p.values_mut().iter_mut().zip(&acc) {
            *slot = (*a / k as f64) as f32;
        }
    });

    // Evaluate everything.
    let ecfg_eval = EvalConfig {
        max_prompts: 96,
        loss_windows: 12,
        seq_len: 128,
    };
    let eval_one = |name: &str, m: &AnyModel<f32>| -> EvalReport {
        let t = Instant::now();
        let r = evaluate(m, &domains, &ecfg_eval, name, "pilot").unwrap();
        eprintln!(
            "  {name:<14} macro {:.3} ({:.1}s) | {}",
            r.macro_avg,
            t.elapsed().as_secs_f64(),
            r.domains
                .iter()
                .map(|(d, m)| format!("{d}:{:.2}", m.exact_match))
                .collect::<Vec<_>>()
                .join(" ")
        );
        r
    };
    let seed_r = eval_one("seed", &AnyModel::Dense(seed_model.clone()));
    let ar = eval_one("expert-arith", &AnyModel::Dense(experts[0].clone()));
    let cr = eval_one("expert-code", &AnyModel::Dense(experts[1].clone()));
    let ci = eval_one("expert-cipher", &AnyModel::Dense(experts[2].clone()));
    let bts_model = AnyModel::Stitched(stitched);
    let bts = eval_one("bts", &bts_model);
    let soup_r = eval_one("soup", &AnyModel::Dense(soup));
    let btm = eval_one(
        "btm",
        &AnyModel::Btm(BtmEnsemble::new(member_refs.iter().map(|m| (*m).clone()).collect()).unwrap()),
    );
    let routed = eval_one(
        "router",
        &AnyModel::Routed(RoutedEnsemble {
            members: member_refs.iter().map(|m| (*m).clone()).collect(),
            router,
        }),
    );

    // Trend checks.
    let exp_reports = [&ar, &cr, &ci];
    let exp_domains = [Domain::Arith, Domain::Code, Domain::Cipher];
    for (r, d) in exp_reports.iter().zip(exp_domains) {
        eprintln!(
            "6a {d:?}: expert {:.3} vs seed {:.3} -> {}",
            r.exact_match_of(d),
            seed_r.exact_match_of(d),
            r.exact_match_of(d) > seed_r.exact_match_of(d)
        );
    }
    let best_dense = seed_r
        .macro_avg
        .max(ar.macro_avg)
        .max(cr.macro_avg)
        .max(ci.macro_avg);
    eprintln!(
        "6c: bts {:.3} vs best dense {:.3}-0.01 | soup {:.3} btm {:.3} router {:.3}",
        bts.macro_avg, best_dense, soup_r.macro_avg, btm.macro_avg, routed.macro_avg
    );

    // Gate behavior.
    let AnyModel::Stitched(stitched) = bts_model else {
        unreachable!()
    };
    let names: Vec<String> = vec![
        "hub".into(),
        "expert-arith".into(),
        "expert-code".into(),
        "expert-cipher".into(),
    ];
    for (d, corp) in [(Domain::Arith, &arith), (Domain::Code, &code), (Domain::Cipher, &cipher)] {
        let items = corp.eval_items(8);
        let mut mass = vec![0.0f64; 3];
        for item in &items {
            let prompt = stitchkit_train::corpus::tokenizer::encode(&item.prompt);
            let tr = trace_gates(&stitched, &prompt, 4, &names).unwrap();
            let last = tr.layers.last().unwrap();
            for row in &last.rows {
                for (i, w) in row[1..].iter().enumerate() {
                    mass[i] += w;
                }
            }
        }
        eprintln!("gates {d:?}: expert mass {mass:?}");
    }
    let segs = vec![
        (
            "cipher".to_string(),
            stitchkit_train::corpus::tokenizer::encode(&cipher.eval[0]),
        ),
        (
            "arith".to_string(),
            stitchkit_train::corpus::tokenizer::encode(&arith.eval[0]),
        ),
    ];
    let (_, summary) = context_switch_probe(&stitched, &segs, &names).unwrap();
    for s in &summary {
        eprintln!("probe {}: {:?}", s.label, s.mean_mass);
    }
    say("done".into());
}
