//! Phase execution with content-addressed reuse: each `ensure_*` derives
//! its run directory from the resolved config plus parent hashes, and
//! skips recomputation when a completed manifest is already there.

use std::collections::BTreeMap;
use std::path::PathBuf;

use anyhow::{anyhow, Context, Result};
use stitchkit_core::ckpt::CkptStore;
use stitchkit_core::rng::Rng;
use stitchkit_model::ckpt_io::{
    load_dense, save_btm_spec, save_dense, save_moe, save_router, save_stitched,
};
use stitchkit_model::merge::{model_soup, train_sequence_router, RouterTrainConfig};
use stitchkit_model::moe::upcycle_moe;
use stitchkit_model::transformer::TransformerModel;
use stitchkit_model::{StitchedModel, TransformerModel as Dense};
use stitchkit_train::corpus::{CorpusSet, Domain, DomainCorpus};
use stitchkit_train::eval::{evaluate, EvalReport};
use stitchkit_train::run::{RunDir, RunManifest};
use stitchkit_train::sampler::MixtureSampler;
use stitchkit_train::trainer::{train, TrainTarget};

use crate::presets::ExperimentConfig;

pub struct Ctx {
    pub root: PathBuf,
    pub seed: u64,
    pub cfg: ExperimentConfig,
}

impl Ctx {
    pub fn store(&self) -> CkptStore {
        CkptStore::new(&self.root)
    }
}

fn to_value<T: serde::Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("config serializes")
}

fn mixture_of<'a>(
    corpora: &'a CorpusSet,
    spec: &[(String, f64)],
) -> Result<Vec<(&'a DomainCorpus, f64)>> {
    spec.iter()
        .map(|(name, w)| Ok((corpora.get(Domain::parse(name)?), *w)))
        .collect::<std::result::Result<Vec<_>, stitchkit_train::TrainError>>()
        .map_err(Into::into)
}

/// Generate (or reuse) the corpora for this config.
pub fn ensure_data(ctx: &Ctx) -> Result<(CorpusSet, RunDir)> {
    let cfg = serde_json::json!({
        "gen": ctx.cfg.data.gen,
        "mixed_n_train": ctx.cfg.data.mixed_n_train,
        "seeds": ctx.cfg.data.seeds,
    });
    let rd = RunDir::create(&ctx.root, "data", &cfg, &[], ctx.seed)?;
    if rd.existing_manifest().is_some() {
        let set = CorpusSet::load(&rd.path.join("corpora"))?;
        return Ok((set, rd));
    }
    let set = CorpusSet::generate(
        &ctx.cfg.data.gen,
        ctx.cfg.data.mixed_n_train,
        &ctx.cfg.data.seeds,
    )?;
    set.save(&rd.path.join("corpora"))?;
    rd.write_manifest(&RunManifest {
        phase: "data".into(),
        parent: None,
        data_spec: cfg.clone(),
        config: cfg,
        seed: ctx.seed,
        config_hash: rd.hash.clone(),
        outputs: BTreeMap::new(),
        complete: true,
    })?;
    Ok((set, rd))
}

fn finish_run(
    rd: &RunDir,
    phase: &str,
    parent: Option<&str>,
    config: serde_json::Value,
    seed: u64,
    outputs: BTreeMap<String, String>,
) -> Result<()> {
    rd.write_manifest(&RunManifest {
        phase: phase.into(),
        parent: parent.map(str::to_string),
        data_spec: serde_json::Value::Null,
        config_hash: rd.hash.clone(),
        config,
        seed,
        outputs,
        complete: true,
    })?;
    Ok(())
}

fn ckpt_hash_of(rd: &RunDir) -> Result<String> {
    let m = rd
        .existing_manifest()
        .ok_or_else(|| anyhow!("run {} has no manifest", rd.path.display()))?;
    m.outputs
        .get("ckpt")
        .cloned()
        .ok_or_else(|| anyhow!("run {} has no ckpt output", rd.path.display()))
}

/// Seed pretraining on the mixed corpus.
pub fn ensure_seed(ctx: &Ctx, corpora: &CorpusSet) -> Result<(RunDir, String)> {
    let cfg = serde_json::json!({
        "model": ctx.cfg.model,
        "train": ctx.cfg.seed_phase.train,
        "mixture": ctx.cfg.seed_phase.mixture,
    });
    let rd = RunDir::create(&ctx.root, "seed", &cfg, &[], ctx.seed)?;
    if rd.existing_manifest().is_some() {
        let h = ckpt_hash_of(&rd)?;
        return Ok((rd, h));
    }
    let mut model = TransformerModel::<f32>::init(&ctx.cfg.model, &Rng::seeded(ctx.seed))
        .context("init seed model")?;
    let mixture = mixture_of(corpora, &ctx.cfg.seed_phase.mixture)?;
    let mut sampler = MixtureSampler::new(
        &mixture,
        ctx.cfg.seed_phase.train.seq_len,
        Rng::seeded(ctx.cfg.seed_phase.train.seed).stream("data/seed"),
    )?;
    train(
        &mut TrainTarget::Dense(&mut model),
        &mut sampler,
        &ctx.cfg.seed_phase.train,
        Some(&rd.metrics_path()),
    )?;
    let hash = save_dense(&rd.ckpt_dir(), &model, "seed", None)?;
    let mut outputs = BTreeMap::new();
    outputs.insert("ckpt".into(), hash.clone());
    finish_run(&rd, "seed", None, cfg, ctx.seed, outputs)?;
    Ok((rd, hash))
}

/// Continued pretraining of one expert branch.
pub fn ensure_expert(
    ctx: &Ctx,
    corpora: &CorpusSet,
    seed_hash: &str,
    domain: Domain,
) -> Result<(RunDir, String)> {
    let mut tcfg = ctx.cfg.expert_phase.train.clone();
    tcfg.seed = tcfg.seed.wrapping_add(domain as u64 * 17);
    let mixture = vec![(domain.as_str().to_string(), 1.0)];
    let cfg = serde_json::json!({
        "domain": domain.as_str(),
        "train": tcfg,
        "mixture": mixture,
    });
    let rd = RunDir::create(&ctx.root, "expert", &cfg, &[seed_hash], ctx.seed)?;
    if rd.existing_manifest().is_some() {
        let h = ckpt_hash_of(&rd)?;
        return Ok((rd, h));
    }
    let mut store = ctx.store();
    let mut model = load_dense::<f32>(&store.resolve(seed_hash)?)?;
    let mixture = mixture_of(corpora, &mixture)?;
    let mut sampler = MixtureSampler::new(
        &mixture,
        tcfg.seq_len,
        Rng::seeded(tcfg.seed).stream("data/expert"),
    )?;
    train(
        &mut TrainTarget::Dense(&mut model),
        &mut sampler,
        &tcfg,
        Some(&rd.metrics_path()),
    )?;
    let hash = save_dense(&rd.ckpt_dir(), &model, "expert", Some(seed_hash))?;
    let mut outputs = BTreeMap::new();
    outputs.insert("ckpt".into(), hash.clone());
    finish_run(&rd, "expert", Some(seed_hash), cfg, ctx.seed, outputs)?;
    Ok((rd, hash))
}

pub struct StitchOutcome {
    pub rd: RunDir,
    pub ckpt_hash: String,
    pub positions: Vec<usize>,
    /// Member tensor hashes before and after training (freeze evidence).
    pub freeze_ok: bool,
}

/// Stitch training over ordered member checkpoint hashes (hub first).
#[allow(clippy::too_many_arguments)]
pub fn ensure_stitch(
    ctx: &Ctx,
    corpora: &CorpusSet,
    member_hashes: &[String],
    k: usize,
    pattern: stitchkit_model::StitchPattern,
    mixture_spec: &[(String, f64)],
    tcfg: &stitchkit_train::schedule::TrainConfig,
    phase: &str,
) -> Result<StitchOutcome> {
    let cfg = serde_json::json!({
        "members": member_hashes,
        "k": k,
        "pattern": pattern,
        "init": ctx.cfg.stitch_phase.init,
        "dropout_rate": ctx.cfg.stitch_phase.dropout_rate,
        "train": tcfg,
        "mixture": mixture_spec,
    });
    let parents: Vec<&str> = member_hashes.iter().map(String::as_str).collect();
    let rd = RunDir::create(&ctx.root, phase, &cfg, &parents, ctx.seed)?;
    if let Some(m) = rd.existing_manifest() {
        return Ok(StitchOutcome {
            ckpt_hash: ckpt_hash_of(&rd)?,
            positions: serde_json::from_value(m.config["positions"].clone())
                .unwrap_or_default(),
            freeze_ok: m.outputs.get("freeze_ok").map(|s| s == "true").unwrap_or(false),
            rd,
        });
    }
    let mut store = ctx.store();
    let mut members = Vec::new();
    for h in member_hashes {
        members.push(load_dense::<f32>(&store.resolve(h)?)?);
    }
    let hub = members.remove(0);
    let mut stitched = StitchedModel::build(
        hub,
        members,
        k,
        pattern,
        ctx.cfg.stitch_phase.init,
        ctx.cfg.stitch_phase.dropout_rate,
    )?;
    let positions = stitched.info.positions.clone();
    if stitched.info.remainder_layers > 0 {
        eprintln!(
            "note: {} remainder layers run after the last stitch",
            stitched.info.remainder_layers
        );
    }
    let before = stitched.member_tensor_hashes();
    let mixture = mixture_of(corpora, mixture_spec)?;
    let mut sampler = MixtureSampler::new(
        &mixture,
        tcfg.seq_len,
        Rng::seeded(tcfg.seed).stream("data/stitch"),
    )?;
    train(
        &mut TrainTarget::Stitched(&mut stitched),
        &mut sampler,
        tcfg,
        Some(&rd.metrics_path()),
    )?;
    let freeze_ok = stitched.member_tensor_hashes() == before;

    let ckpt_hash = save_stitched(
        &rd.ckpt_dir(),
        &stitched,
        phase,
        Some(member_hashes[0].as_str()),
        member_hashes,
    )?;
    let mut cfg = cfg;
    cfg["positions"] = to_value(&positions);
    let mut outputs = BTreeMap::new();
    outputs.insert("ckpt".into(), ckpt_hash.clone());
    outputs.insert("freeze_ok".into(), freeze_ok.to_string());
    finish_run(&rd, phase, Some(&member_hashes[0]), cfg, ctx.seed, outputs)?;
    Ok(StitchOutcome {
        rd,
        ckpt_hash,
        positions,
        freeze_ok,
    })
}

/// Data-matched dense baseline: continued pretraining of one checkpoint.
pub fn ensure_dense_cpt(
    ctx: &Ctx,
    corpora: &CorpusSet,
    parent_hash: &str,
    mixture_spec: &[(String, f64)],
    tcfg: &stitchkit_train::schedule::TrainConfig,
    phase: &str,
) -> Result<(RunDir, String)> {
    let cfg = serde_json::json!({ "train": tcfg, "mixture": mixture_spec });
    let rd = RunDir::create(&ctx.root, phase, &cfg, &[parent_hash], ctx.seed)?;
    if rd.existing_manifest().is_some() {
        let h = ckpt_hash_of(&rd)?;
        return Ok((rd, h));
    }
    let mut store = ctx.store();
    let mut model = load_dense::<f32>(&store.resolve(parent_hash)?)?;
    let mixture = mixture_of(corpora, mixture_spec)?;
    let mut sampler = MixtureSampler::new(
        &mixture,
        tcfg.seq_len,
        Rng::seeded(tcfg.seed).stream("data/cpt"),
    )?;
    train(
        &mut TrainTarget::Dense(&mut model),
        &mut sampler,
        tcfg,
        Some(&rd.metrics_path()),
    )?;
    let hash = save_dense(&rd.ckpt_dir(), &model, phase, Some(parent_hash))?;
    let mut outputs = BTreeMap::new();
    outputs.insert("ckpt".into(), hash.clone());
    finish_run(&rd, phase, Some(parent_hash), cfg, ctx.seed, outputs)?;
    Ok((rd, hash))
}

pub enum MergeMethod {
    Soup,
    Btm,
    Router,
    BtxSoft,
    BamAdapters { freeze: bool },
}

impl MergeMethod {
    pub fn parse(s: &str, freeze: bool) -> Result<Self> {
        Ok(match s {
            "soup" => MergeMethod::Soup,
            "btm" => MergeMethod::Btm,
            "router" => MergeMethod::Router,
            "btx-soft" => MergeMethod::BtxSoft,
            "bam-adapters" => MergeMethod::BamAdapters { freeze },
            other => return Err(anyhow!("unknown merge method `{other}`")),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            MergeMethod::Soup => "soup",
            MergeMethod::Btm => "btm",
            MergeMethod::Router => "router",
            MergeMethod::BtxSoft => "btx-soft",
            MergeMethod::BamAdapters { .. } => "bam-adapters",
        }
    }
}

pub struct MergeOutcome {
    pub rd: RunDir,
    pub ckpt_hash: String,
    /// For adapter training with freeze on: expert tensors untouched.
    pub freeze_ok: Option<bool>,
}

/// Produce a baseline merge artifact from member checkpoints (seed first).
pub fn ensure_merge(
    ctx: &Ctx,
    corpora: &CorpusSet,
    member_hashes: &[String],
    method: &MergeMethod,
) -> Result<MergeOutcome> {
    let cfg = serde_json::json!({
        "method": method.name(),
        "members": member_hashes,
        "bam_train": ctx.cfg.bam_phase.train,
        "router": ctx.cfg.router,
    });
    let parents: Vec<&str> = member_hashes.iter().map(String::as_str).collect();
    let phase = format!("merge-{}", method.name());
    let rd = RunDir::create(&ctx.root, &phase, &cfg, &parents, ctx.seed)?;
    if let Some(m) = rd.existing_manifest() {
        return Ok(MergeOutcome {
            ckpt_hash: ckpt_hash_of(&rd)?,
            freeze_ok: m.outputs.get("freeze_ok").map(|s| s == "true"),
            rd,
        });
    }
    let mut store = ctx.store();
    let mut freeze_ok = None;
    let ckpt_hash = match method {
        MergeMethod::Soup => {
            let ckpts: Vec<_> = member_hashes
                .iter()
                .map(|h| store.resolve(h))
                .collect::<std::result::Result<_, _>>()?;
            let refs: Vec<&stitchkit_core::ckpt::Ckpt> = ckpts.iter().collect();
            let (tensors, config) = model_soup::<f32>(&refs)?;
            let mut w = stitchkit_core::ckpt::CkptWriter::new("dense", "baseline-merge");
            w.config = config;
            w.parent = Some(member_hashes[0].clone());
            for (name, t) in &tensors {
                w.add_tensor(name, t);
            }
            w.write(&rd.ckpt_dir())?
        }
        MergeMethod::Btm => save_btm_spec(&rd.ckpt_dir(), member_hashes)?,
        MergeMethod::Router => {
            let members: Vec<Dense<f32>> = member_hashes
                .iter()
                .map(|h| store.resolve(h).map_err(anyhow::Error::from).and_then(|c| {
                    load_dense::<f32>(&c).map_err(anyhow::Error::from)
                }))
                .collect::<Result<_>>()?;
            let refs: Vec<&Dense<f32>> = members.iter().collect();
            // Label sequences drawn evenly across the domains.
            let rcfg = &ctx.cfg.router;
            let mut sampler = MixtureSampler::new(
                &[
                    (&corpora.arith, 1.0),
                    (&corpora.code, 1.0),
                    (&corpora.cipher, 1.0),
                    (&corpora.mixed, 1.0),
                ],
                rcfg.label_seq_len,
                Rng::seeded(ctx.seed).stream("router/labels"),
            )?;
            let seqs: Vec<Vec<u32>> = (0..rcfg.label_seqs).map(|_| sampler.next_batch(1)).collect();
            let router = train_sequence_router(
                &refs,
                &seqs,
                &RouterTrainConfig {
                    t_min: rcfg.t_min,
                    t_max: rcfg.t_max,
                    lr: rcfg.lr,
                    steps: rcfg.steps,
                },
                &Rng::seeded(ctx.seed).stream("router/train"),
            )?;
            save_router(&rd.ckpt_dir(), &router, "router", member_hashes)?
        }
        MergeMethod::BtxSoft | MergeMethod::BamAdapters { .. } => {
            let members: Vec<Dense<f32>> = member_hashes
                .iter()
                .map(|h| store.resolve(h).map_err(anyhow::Error::from).and_then(|c| {
                    load_dense::<f32>(&c).map_err(anyhow::Error::from)
                }))
                .collect::<Result<_>>()?;
            let refs: Vec<&Dense<f32>> = members.iter().collect();
            let (with_attention, with_adapters, freeze) = match method {
                MergeMethod::BtxSoft => (false, false, false),
                MergeMethod::BamAdapters { freeze } => (true, true, *freeze),
                _ => unreachable!(),
            };
            let mut up = upcycle_moe(&refs, with_attention, with_adapters, freeze, None)?;
            let before = up.expert_tensor_hashes();
            let tcfg = &ctx.cfg.bam_phase.train;
            let mixture = mixture_of(corpora, &ctx.cfg.bam_phase.mixture)?;
            let mut sampler = MixtureSampler::new(
                &mixture,
                tcfg.seq_len,
                Rng::seeded(tcfg.seed).stream("data/moe"),
            )?;
            train(
                &mut TrainTarget::Upcycled(&mut up),
                &mut sampler,
                tcfg,
                Some(&rd.metrics_path()),
            )?;
            if freeze {
                freeze_ok = Some(up.expert_tensor_hashes() == before);
            }
            save_moe(&rd.ckpt_dir(), &up, "baseline-merge", Some(&member_hashes[0]), member_hashes)?
        }
    };
    let mut outputs = BTreeMap::new();
    outputs.insert("ckpt".into(), ckpt_hash.clone());
    if let Some(ok) = freeze_ok {
        outputs.insert("freeze_ok".into(), ok.to_string());
    }
    finish_run(&rd, &phase, Some(&member_hashes[0]), cfg, ctx.seed, outputs)?;
    Ok(MergeOutcome {
        rd,
        ckpt_hash,
        freeze_ok,
    })
}

/// Evaluate a checkpoint over domains; report cached by config hash.
pub fn ensure_eval(
    ctx: &Ctx,
    corpora: &CorpusSet,
    label: &str,
    ckpt_hash: &str,
    domains: &[Domain],
) -> Result<EvalReport> {
    let cfg = serde_json::json!({
        "model": ckpt_hash,
        "label": label,
        "domains": domains.iter().map(|d| d.as_str()).collect::<Vec<_>>(),
        "eval": ctx.cfg.eval,
    });
    let rd = RunDir::create(&ctx.root, "eval", &cfg, &[ckpt_hash], ctx.seed)?;
    let report_path = rd.path.join("report.json");
    if rd.existing_manifest().is_some() && report_path.exists() {
        return Ok(EvalReport::load(&report_path)?);
    }
    let mut store = ctx.store();
    let ck = store.resolve(ckpt_hash)?;
    let model = stitchkit_model::ckpt_io::load_any(&ck.dir, &mut store)?;
    let corpora_refs: Vec<&DomainCorpus> = domains.iter().map(|&d| corpora.get(d)).collect();
    let report = evaluate(&model, &corpora_refs, &ctx.cfg.eval, ckpt_hash, &rd.hash)?;
    report.save(&report_path)?;
    finish_run(&rd, "eval", Some(ckpt_hash), cfg, ctx.seed, BTreeMap::new())?;
    Ok(report)
}
