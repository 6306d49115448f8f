//! Suite orchestration: the committed end-to-end pipelines plus their
//! trend assertions. Each suite prints one PASS/FAIL line per assertion
//! and writes a machine-readable summary into the run root.

use std::collections::BTreeMap;

use anyhow::{anyhow, Result};
use stitchkit_model::ckpt_io::load_stitched;
use stitchkit_model::StitchPattern;
use stitchkit_train::corpus::{tokenizer, Domain};
use stitchkit_train::eval::EvalReport;
use stitchkit_train::trace::{context_switch_probe, trace_gates};
use stitchkit_train::trainer::MetricRecord;

use crate::workflow::{
    ensure_data, ensure_dense_cpt, ensure_eval, ensure_merge, ensure_seed, ensure_stitch,
    ensure_expert, Ctx, MergeMethod,
};

#[derive(Debug, Clone, serde::Serialize)]
pub struct Assertion {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Default, serde::Serialize)]
pub struct SuiteSummary {
    pub assertions: Vec<Assertion>,
    pub ckpt_hashes: BTreeMap<String, String>,
    pub macro_avgs: BTreeMap<String, f64>,
    pub values: BTreeMap<String, serde_json::Value>,
}

impl SuiteSummary {
    fn assert(&mut self, name: &str, pass: bool, detail: String) {
        println!("ASSERT {name}: {} ({detail})", if pass { "PASS" } else { "FAIL" });
        self.assertions.push(Assertion {
            name: name.to_string(),
            pass,
            detail,
        });
    }

    pub fn all_pass(&self) -> bool {
        self.assertions.iter().all(|a| a.pass)
    }
}

fn read_metrics(path: &std::path::Path) -> Result<Vec<MetricRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .map(|l| serde_json::from_str(l).map_err(Into::into))
        .collect()
}

pub struct CoreArtifacts {
    pub seed_hash: String,
    pub expert_hashes: Vec<(Domain, String)>,
    pub reports: BTreeMap<String, EvalReport>,
    pub summary: SuiteSummary,
}

const EVAL_DOMAINS: [Domain; 4] = [Domain::Arith, Domain::Code, Domain::Cipher, Domain::Mixed];
const EXPERT_DOMAINS: [Domain; 3] = [Domain::Arith, Domain::Code, Domain::Cipher];

pub fn member_names() -> Vec<String> {
    vec![
        "seed".into(),
        "expert-arith".into(),
        "expert-code".into(),
        "expert-cipher".into(),
    ]
}

/// The core suite: data -> seed -> branch(3) -> experts -> stitch ->
/// merges -> eval-all -> gates, with the specialization/merging trend
/// assertions.
pub fn run_core(ctx: &Ctx) -> Result<CoreArtifacts> {
    let mut summary = SuiteSummary::default();
    let (corpora, _) = ensure_data(ctx)?;
    println!("phase data: ready");

    let (seed_rd, seed_hash) = ensure_seed(ctx, &corpora)?;
    println!("phase seed: ckpt {seed_hash}");
    summary.ckpt_hashes.insert("seed".into(), seed_hash.clone());
    let metrics = read_metrics(&seed_rd.metrics_path())?;
    let (first, last) = (
        metrics.first().map(|r| r.loss).unwrap_or(f64::NAN),
        metrics.last().map(|r| r.loss).unwrap_or(f64::NAN),
    );
    summary.assert(
        "core.seed-loss-drop",
        last < first - 1.0,
        format!("loss {first:.3} -> {last:.3}"),
    );

    // Branch: three expert manifests off the seed checkpoint.
    let mixtures: Vec<(String, serde_json::Value)> = EXPERT_DOMAINS
        .iter()
        .map(|d| {
            (
                d.as_str().to_string(),
                serde_json::json!({ d.as_str(): 1.0 }),
            )
        })
        .collect();
    let branch_manifests = stitchkit_train::run::branch(&seed_hash, &mixtures, ctx.seed)?;
    println!("phase branch: {} expert manifests", branch_manifests.len());

    let mut expert_hashes = Vec::new();
    for d in EXPERT_DOMAINS {
        let (_, h) = ensure_expert(ctx, &corpora, &seed_hash, d)?;
        println!("phase expert-{}: ckpt {h}", d.as_str());
        summary
            .ckpt_hashes
            .insert(format!("expert-{}", d.as_str()), h.clone());
        expert_hashes.push((d, h));
    }

    // Stitch: hub = seed unless the preset swaps it.
    let members: Vec<String> = std::iter::once(seed_hash.clone())
        .chain(expert_hashes.iter().map(|(_, h)| h.clone()))
        .collect();
    let stitch = ensure_stitch(
        ctx,
        &corpora,
        &members,
        ctx.cfg.stitch_phase.k,
        ctx.cfg.stitch_phase.pattern,
        &ctx.cfg.stitch_phase.mixture.clone(),
        &ctx.cfg.stitch_phase.train,
        "stitch",
    )?;
    println!(
        "phase stitch: positions {:?}, ckpt {}",
        stitch.positions, stitch.ckpt_hash
    );
    summary
        .ckpt_hashes
        .insert("bts".into(), stitch.ckpt_hash.clone());
    summary.assert(
        "core.freeze-stitch",
        stitch.freeze_ok,
        "hub/expert tensors bit-identical after stitch phase".into(),
    );

    // Merge baselines.
    let soup = ensure_merge(ctx, &corpora, &members, &MergeMethod::Soup)?;
    let btm = ensure_merge(ctx, &corpora, &members, &MergeMethod::Btm)?;
    let router = ensure_merge(ctx, &corpora, &members, &MergeMethod::Router)?;
    let bam = ensure_merge(
        ctx,
        &corpora,
        &members,
        &MergeMethod::BamAdapters { freeze: true },
    )?;
    println!("phase merges: soup {} btm {} router {}", soup.ckpt_hash, btm.ckpt_hash, router.ckpt_hash);
    summary.ckpt_hashes.insert("soup".into(), soup.ckpt_hash.clone());
    summary.ckpt_hashes.insert("btm".into(), btm.ckpt_hash.clone());
    summary
        .ckpt_hashes
        .insert("router".into(), router.ckpt_hash.clone());
    summary
        .ckpt_hashes
        .insert("bam-adapters".into(), bam.ckpt_hash.clone());
    summary.assert(
        "core.freeze-bam-adapters",
        bam.freeze_ok == Some(true),
        "expert tensors bit-identical after adapters training".into(),
    );

    // Evaluate every model spec on the four domains.
    let mut reports: BTreeMap<String, EvalReport> = BTreeMap::new();
    let specs: Vec<(String, String)> = vec![
        ("seed".into(), seed_hash.clone()),
        ("expert-arith".into(), expert_hashes[0].1.clone()),
        ("expert-code".into(), expert_hashes[1].1.clone()),
        ("expert-cipher".into(), expert_hashes[2].1.clone()),
        ("bts".into(), stitch.ckpt_hash.clone()),
        ("soup".into(), soup.ckpt_hash.clone()),
        ("btm".into(), btm.ckpt_hash.clone()),
        ("router".into(), router.ckpt_hash.clone()),
    ];
    for (label, hash) in &specs {
        let report = ensure_eval(ctx, &corpora, label, hash, &EVAL_DOMAINS)?;
        println!(
            "eval {label:<14} macro {:.3} | {}",
            report.macro_avg,
            report
                .domains
                .iter()
                .map(|(d, m)| format!("{d}:{:.2}", m.exact_match))
                .collect::<Vec<_>>()
                .join(" ")
        );
        summary.macro_avgs.insert(label.clone(), report.macro_avg);
        reports.insert(label.clone(), report);
    }

    // Trend assertions (the Table-2-shaped qualitative checks).
    let seed_r = &reports["seed"];
    for d in EXPERT_DOMAINS {
        let er = &reports[&format!("expert-{}", d.as_str())];
        summary.assert(
            &format!("core.expert-beats-seed.{}", d.as_str()),
            er.exact_match_of(d) > seed_r.exact_match_of(d),
            format!(
                "expert {:.3} vs seed {:.3}",
                er.exact_match_of(d),
                seed_r.exact_match_of(d)
            ),
        );
    }
    // Specialization margin pinned from the committed golden run.
    let arith_gap = reports["expert-arith"].exact_match_of(Domain::Arith)
        - seed_r.exact_match_of(Domain::Arith);
    summary.assert(
        "core.arith-specialization-margin",
        arith_gap >= 0.10,
        format!("gap {:.3} >= 0.10", arith_gap),
    );
    for d in EXPERT_DOMAINS {
        let er = &reports[&format!("expert-{}", d.as_str())];
        let beaten = EVAL_DOMAINS.iter().any(|&other| {
            other != d && seed_r.exact_match_of(other) > er.exact_match_of(other)
        });
        summary.assert(
            &format!("core.datamix-tradeoff.{}", d.as_str()),
            beaten,
            "seed beats the expert on at least one other domain".into(),
        );
    }
    let bts_macro = reports["bts"].macro_avg;
    let best_dense = [
        seed_r.macro_avg,
        reports["expert-arith"].macro_avg,
        reports["expert-code"].macro_avg,
        reports["expert-cipher"].macro_avg,
    ]
    .into_iter()
    .fold(f64::NEG_INFINITY, f64::max);
    summary.assert(
        "core.bts-vs-dense",
        bts_macro >= best_dense - 0.01,
        format!("bts {bts_macro:.3} vs best dense {best_dense:.3} - 0.01"),
    );
    for other in ["soup", "btm", "router"] {
        summary.assert(
            &format!("core.bts-vs-{other}"),
            bts_macro >= reports[other].macro_avg,
            format!("bts {bts_macro:.3} vs {other} {:.3}", reports[other].macro_avg),
        );
    }

    // Gate behavior: per-domain prompts put the matching expert on top of
    // the expert gate mass at the last stitch layer.
    let mut store = ctx.store();
    let bts_ckpt = store.resolve(&stitch.ckpt_hash)?;
    let bts_model = load_stitched::<f32>(&bts_ckpt, &mut store)?;
    let names = member_names();
    let gates_dir = ctx.root.join(format!("gates-{}", &stitch.ckpt_hash[..12]));
    std::fs::create_dir_all(&gates_dir)?;
    let mut rows_sum_ok = true;
    for (di, d) in EXPERT_DOMAINS.iter().enumerate() {
        let corpus = corpora.get(*d);
        let items = corpus.eval_items(6);
        let mut expert_mass = vec![0.0f64; 3];
        let mut trace0 = None;
        for item in &items {
            let prompt = tokenizer::encode(&item.prompt);
            let budget = tokenizer::encode(&item.answer).len() + 2;
            let trace = trace_gates(&bts_model, &prompt, budget, &names)?;
            let last = trace
                .layers
                .iter()
                .rev()
                .find(|l| l.kind == stitchkit_model::StitchKind::ExpertsIntoHub)
                .ok_or_else(|| anyhow!("no Experts-into-Hub layer in trace"))?;
            for row in &last.rows {
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > 1e-6 {
                    rows_sum_ok = false;
                }
                for (i, w) in row[1..].iter().enumerate() {
                    expert_mass[i] += w;
                }
            }
            if trace0.is_none() {
                trace0 = Some(trace);
            }
        }
        if let Some(t) = trace0 {
            stitchkit_train::trace::write_csv(&t, &gates_dir.join(format!("{}.csv", d.as_str())))?;
            stitchkit_train::trace::write_json(&t, &gates_dir.join(format!("{}.json", d.as_str())))?;
            stitchkit_train::trace::write_svg(&t, &gates_dir.join(format!("{}.svg", d.as_str())))?;
        }
        let argmax = expert_mass
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        summary.assert(
            &format!("core.gate-argmax.{}", d.as_str()),
            argmax == di,
            format!("expert mass {expert_mass:?}, argmax {argmax} want {di}"),
        );
        summary.values.insert(
            format!("gate-mass-{}", d.as_str()),
            serde_json::json!(expert_mass),
        );
    }
    summary.assert(
        "core.gate-rows-sum-to-one",
        rows_sum_ok,
        "per-token Experts-into-Hub weights sum to 1 +- 1e-6".into(),
    );

    // Context-switch probe: expert-mass argmax must change across the
    // domain boundary.
    let segs = vec![
        (
            "cipher".to_string(),
            tokenizer::encode(&corpora.cipher.eval[0]),
        ),
        (
            "arith".to_string(),
            tokenizer::encode(&corpora.arith.eval[0]),
        ),
    ];
    let (probe_trace, probe_summary) = context_switch_probe(&bts_model, &segs, &names)?;
    stitchkit_train::trace::write_csv(&probe_trace, &gates_dir.join("probe.csv"))?;
    stitchkit_train::trace::write_svg(&probe_trace, &gates_dir.join("probe.svg"))?;
    let seg_argmax: Vec<usize> = probe_summary
        .iter()
        .map(|s| {
            s.mean_mass[1..]
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap()
        })
        .collect();
    summary.assert(
        "core.context-switch",
        seg_argmax[0] != seg_argmax[1],
        format!(
            "segment expert argmax {:?} (mass {:?} / {:?})",
            seg_argmax, probe_summary[0].mean_mass, probe_summary[1].mean_mass
        ),
    );

    let summary_path = ctx.root.join("core_summary.json");
    std::fs::write(&summary_path, serde_json::to_vec_pretty(&summary)?)?;
    println!("summary written to {}", summary_path.display());

    Ok(CoreArtifacts {
        seed_hash,
        expert_hashes,
        reports,
        summary,
    })
}

/// Cross-capability suite: 2-expert stitch (arith + cipher) trained on
/// cipher_arith, against the data-matched seed and the all-EiH pattern.
pub fn run_crosscap(ctx: &Ctx) -> Result<SuiteSummary> {
    let core = run_core(ctx)?;
    let mut summary = SuiteSummary::default();
    let (corpora, _) = ensure_data(ctx)?;

    let hash_of = |label: &str| -> Result<String> {
        core.summary
            .ckpt_hashes
            .get(label)
            .cloned()
            .ok_or_else(|| anyhow!("missing core artifact {label}"))
    };
    let members: Vec<String> = ctx
        .cfg
        .crosscap_phase
        .members
        .iter()
        .map(|m| hash_of(m))
        .collect::<Result<_>>()?;
    let mixture = vec![("cipher_arith".to_string(), 1.0)];

    let alt = ensure_stitch(
        ctx,
        &corpora,
        &members,
        ctx.cfg.crosscap_phase.k,
        StitchPattern::Alternating,
        &mixture,
        &ctx.cfg.crosscap_phase.train,
        "crosscap-alt",
    )?;
    let all_eih = ensure_stitch(
        ctx,
        &corpora,
        &members,
        ctx.cfg.crosscap_phase.k,
        StitchPattern::AllExpertsIntoHub,
        &mixture,
        &ctx.cfg.crosscap_phase.train,
        "crosscap-alleih",
    )?;
    let (_, dm_hash) = ensure_dense_cpt(
        ctx,
        &corpora,
        &core.seed_hash,
        &mixture,
        &ctx.cfg.crosscap_phase.dm_train,
        "crosscap-dm",
    )?;
    summary.ckpt_hashes.insert("crosscap-alt".into(), alt.ckpt_hash.clone());
    summary
        .ckpt_hashes
        .insert("crosscap-alleih".into(), all_eih.ckpt_hash.clone());
    summary.ckpt_hashes.insert("crosscap-dm".into(), dm_hash.clone());
    summary.assert(
        "crosscap.freeze",
        alt.freeze_ok && all_eih.freeze_ok,
        "member tensors frozen through both stitch runs".into(),
    );

    let target = [Domain::CipherArith];
    let alt_r = ensure_eval(ctx, &corpora, "crosscap-alt", &alt.ckpt_hash, &target)?;
    let eih_r = ensure_eval(ctx, &corpora, "crosscap-alleih", &all_eih.ckpt_hash, &target)?;
    let dm_r = ensure_eval(ctx, &corpora, "crosscap-dm", &dm_hash, &target)?;
    let (alt_em, eih_em, dm_em) = (
        alt_r.exact_match_of(Domain::CipherArith),
        eih_r.exact_match_of(Domain::CipherArith),
        dm_r.exact_match_of(Domain::CipherArith),
    );
    println!("crosscap EM: alternating {alt_em:.3} all-eih {eih_em:.3} data-matched seed {dm_em:.3}");
    summary.values.insert(
        "crosscap-em".into(),
        serde_json::json!({"alt": alt_em, "all_eih": eih_em, "dm": dm_em}),
    );
    summary.assert(
        "crosscap.bts-beats-dm",
        alt_em > dm_em,
        format!("alternating {alt_em:.3} > data-matched {dm_em:.3}"),
    );
    summary.assert(
        "crosscap.alternating-ge-alleih",
        alt_em >= eih_em,
        format!("alternating {alt_em:.3} >= all-eih {eih_em:.3}"),
    );

    let path = ctx.root.join("crosscap_summary.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&summary)?)?;
    println!("summary written to {}", path.display());
    Ok(summary)
}

/// Hub ablation: best-macro expert takes the hub slot; the seed becomes a
/// spoke. Seed-as-hub must stay at least as good on the macro average.
pub fn run_hub(ctx: &Ctx) -> Result<SuiteSummary> {
    let core = run_core(ctx)?;
    let mut summary = SuiteSummary::default();
    let (corpora, _) = ensure_data(ctx)?;

    let best_expert = EXPERT_DOMAINS
        .iter()
        .max_by(|a, b| {
            let ma = core.reports[&format!("expert-{}", a.as_str())].macro_avg;
            let mb = core.reports[&format!("expert-{}", b.as_str())].macro_avg;
            ma.partial_cmp(&mb).unwrap()
        })
        .copied()
        .unwrap();
    println!("hub ablation: {} expert takes the hub slot", best_expert.as_str());
    let best_hash = core.summary.ckpt_hashes[&format!("expert-{}", best_expert.as_str())].clone();
    let mut members = vec![best_hash, core.seed_hash.clone()];
    for (d, h) in &core.expert_hashes {
        if *d != best_expert {
            members.push(h.clone());
        }
    }
    let swap = ensure_stitch(
        ctx,
        &corpora,
        &members,
        ctx.cfg.stitch_phase.k,
        ctx.cfg.stitch_phase.pattern,
        &ctx.cfg.stitch_phase.mixture.clone(),
        &ctx.cfg.stitch_phase.train,
        "stitch-hubswap",
    )?;
    let swap_r = ensure_eval(ctx, &corpora, "bts-hubswap", &swap.ckpt_hash, &EVAL_DOMAINS)?;
    let seed_hub_macro = core.reports["bts"].macro_avg;
    println!(
        "hub ablation macro: seed-hub {seed_hub_macro:.3} vs expert-hub {:.3}",
        swap_r.macro_avg
    );
    summary
        .ckpt_hashes
        .insert("bts-hubswap".into(), swap.ckpt_hash.clone());
    summary.values.insert(
        "hub-macros".into(),
        serde_json::json!({"seed_hub": seed_hub_macro, "expert_hub": swap_r.macro_avg}),
    );
    summary.assert(
        "hub.seed-hub-ge-expert-hub",
        seed_hub_macro >= swap_r.macro_avg,
        format!("{seed_hub_macro:.3} >= {:.3}", swap_r.macro_avg),
    );

    let path = ctx.root.join("hub_summary.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&summary)?)?;
    println!("summary written to {}", path.display());
    Ok(summary)
}
