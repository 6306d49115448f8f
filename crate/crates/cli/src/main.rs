//! stitchkit: train, merge, and dissect small expert language models.

mod presets;
mod replicate;
mod workflow;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, Result};
use clap::{Parser, Subcommand};
use stitchkit_model::ckpt_io::load_stitched;
use stitchkit_model::StitchPattern;
use stitchkit_train::corpus::{tokenizer, Domain};

use presets::{resolve_config, PRESET_NAMES};
use workflow::{
    ensure_data, ensure_eval, ensure_expert, ensure_merge, ensure_seed, ensure_stitch, Ctx,
    MergeMethod,
};

/// Error that should exit with the config code (3).
#[derive(Debug)]
struct ConfigErr(String);
impl std::fmt::Display for ConfigErr {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.0.fmt(f)
    }
}
impl std::error::Error for ConfigErr {}

#[derive(Parser)]
#[command(
    name = "stitchkit",
    version,
    about = "Branch, train, and stitch expert language models at desk scale",
    after_help = preset_help()
)]
struct Cli {
    /// Run root; defaults to $STITCHKIT_RUNS or ./runs
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Master seed; every stochastic site derives from it
    #[arg(long, global = true, default_value_t = 7)]
    seed: u64,

    /// Preset name or path to a resolved config JSON
    #[arg(long, global = true)]
    config: Option<String>,

    #[command(subcommand)]
    cmd: Cmd,
}

fn preset_help() -> String {
    format!("presets:\n  {}", PRESET_NAMES.join("\n  "))
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic corpora
    GenData,
    /// Pretrain the seed model on the mixed corpus
    Pretrain,
    /// Create expert run manifests branching off the seed checkpoint
    Branch {
        #[arg(long, default_value_t = 3)]
        n: usize,
    },
    /// Continued-pretrain one expert branch
    TrainExpert {
        #[arg(long)]
        domain: String,
    },
    /// Build and train a stitched model over the seed and experts
    Stitch {
        #[arg(long = "K")]
        k: Option<usize>,
        /// alternating | all-eih
        #[arg(long)]
        pattern: Option<String>,
        /// seed | expert-<domain>
        #[arg(long)]
        hub: Option<String>,
    },
    /// Produce a baseline merge artifact
    Merge {
        /// soup | btm | router | btx-soft | bam-adapters
        #[arg(long)]
        method: String,
        /// on | off (member freezing for adapter training)
        #[arg(long, default_value = "on")]
        freeze: String,
    },
    /// Evaluate a model spec over the four domains
    Eval {
        /// Role name (seed, expert-<d>, bts, soup, btm, router) or a
        /// checkpoint directory path
        #[arg(long)]
        model: String,
    },
    /// Gate-value traces for domain prompts on a stitched checkpoint
    Gates {
        #[arg(long, default_value = "bts")]
        model: String,
        #[arg(long, default_value = "arith")]
        domain: String,
        #[arg(long, default_value_t = 16)]
        n_generate: usize,
    },
    /// Context-switch probe over concatenated domain segments
    Probe {
        #[arg(long, default_value = "bts")]
        model: String,
        /// Comma-separated domain list, e.g. cipher,arith
        #[arg(long, default_value = "cipher,arith")]
        segments: String,
    },
    /// Run a committed end-to-end suite and check its assertions
    Replicate {
        /// core | crosscap | hub | all
        #[arg(long, default_value = "core")]
        suite: String,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (kind, code) = if e.downcast_ref::<ConfigErr>().is_some() {
                ("config", ExitCode::from(3))
            } else {
                ("run", ExitCode::from(1))
            };
            eprintln!(
                "{}",
                serde_json::json!({"error": {"kind": kind, "message": format!("{e:#}")}})
            );
            code
        }
    }
}

fn default_preset(cmd: &Cmd) -> String {
    match cmd {
        Cmd::GenData | Cmd::Pretrain | Cmd::Branch { .. } => "seed-pretrain".into(),
        Cmd::TrainExpert { domain } => format!("expert-{domain}"),
        Cmd::Stitch { .. } => "bts-stitch".into(),
        Cmd::Merge { method, .. } => format!("baseline-{method}"),
        _ => "core".into(),
    }
}

fn run(cli: Cli) -> Result<()> {
    let root = cli
        .out
        .or_else(|| std::env::var_os("STITCHKIT_RUNS").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"));
    std::fs::create_dir_all(&root)?;
    let spec = cli.config.unwrap_or_else(|| default_preset(&cli.cmd));
    let cfg = resolve_config(&spec, cli.seed).map_err(|m| anyhow!(ConfigErr(m)))?;
    let ctx = Ctx {
        root,
        seed: cli.seed,
        cfg,
    };

    match cli.cmd {
        Cmd::GenData => {
            let (_, rd) = ensure_data(&ctx)?;
            println!("data ready at {}", rd.path.display());
        }
        Cmd::Pretrain => {
            let (corpora, _) = ensure_data(&ctx)?;
            let (rd, hash) = ensure_seed(&ctx, &corpora)?;
            println!("seed checkpoint {hash} at {}", rd.ckpt_dir().display());
        }
        Cmd::Branch { n } => {
            if n == 0 || n > 3 {
                return Err(anyhow!(ConfigErr(format!(
                    "cannot branch into {n} experts (1..=3 domains available)"
                ))));
            }
            let (corpora, _) = ensure_data(&ctx)?;
            let (_, seed_hash) = ensure_seed(&ctx, &corpora)?;
            let domains = ["arith", "code", "cipher"];
            let mixtures: Vec<(String, serde_json::Value)> = domains[..n]
                .iter()
                .map(|d| (d.to_string(), serde_json::json!({ *d: 1.0 })))
                .collect();
            let manifests = stitchkit_train::run::branch(&seed_hash, &mixtures, ctx.seed)?;
            let dir = ctx.root.join(format!("branch-{}", &seed_hash[..12]));
            std::fs::create_dir_all(&dir)?;
            for m in &manifests {
                let path = dir.join(format!("{}.json", m.config["expert"].as_str().unwrap()));
                std::fs::write(&path, serde_json::to_vec_pretty(m)?)?;
                println!(
                    "manifest {} -> parent {}",
                    path.display(),
                    m.parent.as_deref().unwrap_or("-")
                );
            }
        }
        Cmd::TrainExpert { domain } => {
            let d = Domain::parse(&domain).map_err(|e| anyhow!(ConfigErr(e.to_string())))?;
            let (corpora, _) = ensure_data(&ctx)?;
            let (_, seed_hash) = ensure_seed(&ctx, &corpora)?;
            let (rd, hash) = ensure_expert(&ctx, &corpora, &seed_hash, d)?;
            println!("expert-{domain} checkpoint {hash} at {}", rd.ckpt_dir().display());
        }
        Cmd::Stitch { k, pattern, hub } => {
            let mut ctx = ctx;
            if let Some(k) = k {
                ctx.cfg.stitch_phase.k = k;
            }
            if let Some(p) = pattern {
                ctx.cfg.stitch_phase.pattern = match p.as_str() {
                    "alternating" => StitchPattern::Alternating,
                    "all-eih" => StitchPattern::AllExpertsIntoHub,
                    other => {
                        return Err(anyhow!(ConfigErr(format!("unknown pattern `{other}`"))))
                    }
                };
            }
            if let Some(h) = hub {
                ctx.cfg.stitch_phase.hub = h;
            }
            let (corpora, _) = ensure_data(&ctx)?;
            let (_, seed_hash) = ensure_seed(&ctx, &corpora)?;
            let mut expert_hashes = Vec::new();
            for d in [Domain::Arith, Domain::Code, Domain::Cipher] {
                let (_, h) = ensure_expert(&ctx, &corpora, &seed_hash, d)?;
                expert_hashes.push((d, h));
            }
            // Order members so the configured hub takes slot 0.
            let mut members = vec![seed_hash.clone()];
            members.extend(expert_hashes.iter().map(|(_, h)| h.clone()));
            if ctx.cfg.stitch_phase.hub != "seed" {
                let want = ctx.cfg.stitch_phase.hub.trim_start_matches("expert-");
                let idx = expert_hashes
                    .iter()
                    .position(|(d, _)| d.as_str() == want)
                    .ok_or_else(|| {
                        anyhow!(ConfigErr(format!(
                            "unknown hub `{}`",
                            ctx.cfg.stitch_phase.hub
                        )))
                    })?;
                members.swap(0, idx + 1);
            }
            let out = ensure_stitch(
                &ctx,
                &corpora,
                &members,
                ctx.cfg.stitch_phase.k,
                ctx.cfg.stitch_phase.pattern,
                &ctx.cfg.stitch_phase.mixture.clone(),
                &ctx.cfg.stitch_phase.train,
                "stitch",
            )?;
            println!("stitch positions {:?}", out.positions);
            println!("stitched checkpoint {} at {}", out.ckpt_hash, out.rd.ckpt_dir().display());
        }
        Cmd::Merge { method, freeze } => {
            let freeze_on = match freeze.as_str() {
                "on" => true,
                "off" => false,
                other => return Err(anyhow!(ConfigErr(format!("bad --freeze `{other}`")))),
            };
            let method = MergeMethod::parse(&method, freeze_on)
                .map_err(|e| anyhow!(ConfigErr(e.to_string())))?;
            let (corpora, _) = ensure_data(&ctx)?;
            let (_, seed_hash) = ensure_seed(&ctx, &corpora)?;
            let mut members = vec![seed_hash.clone()];
            for d in [Domain::Arith, Domain::Code, Domain::Cipher] {
                let (_, h) = ensure_expert(&ctx, &corpora, &seed_hash, d)?;
                members.push(h);
            }
            let out = ensure_merge(&ctx, &corpora, &members, &method)?;
            println!(
                "merge {} checkpoint {} at {}",
                method.name(),
                out.ckpt_hash,
                out.rd.ckpt_dir().display()
            );
        }
        Cmd::Eval { model } => {
            let (corpora, _) = ensure_data(&ctx)?;
            let hash = resolve_model_hash(&ctx, &corpora, &model)?;
            let domains = [Domain::Arith, Domain::Code, Domain::Cipher, Domain::Mixed];
            let report = ensure_eval(&ctx, &corpora, &model, &hash, &domains)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Cmd::Gates {
            model,
            domain,
            n_generate,
        } => {
            let d = Domain::parse(&domain).map_err(|e| anyhow!(ConfigErr(e.to_string())))?;
            let (corpora, _) = ensure_data(&ctx)?;
            let hash = resolve_model_hash(&ctx, &corpora, &model)?;
            let mut store = ctx.store();
            let ck = store.resolve(&hash)?;
            let stitched = load_stitched::<f32>(&ck, &mut store)?;
            let item = corpora
                .get(d)
                .eval_items(1)
                .into_iter()
                .next()
                .ok_or_else(|| anyhow!("domain {domain} has no promptable items"))?;
            let prompt = tokenizer::encode(&item.prompt);
            let trace = stitchkit_train::trace::trace_gates(
                &stitched,
                &prompt,
                n_generate,
                &replicate::member_names(),
            )?;
            let dir = ctx.root.join(format!("gates-{}-{domain}", &hash[..12]));
            std::fs::create_dir_all(&dir)?;
            stitchkit_train::trace::write_csv(&trace, &dir.join("trace.csv"))?;
            stitchkit_train::trace::write_json(&trace, &dir.join("trace.json"))?;
            stitchkit_train::trace::write_svg(&trace, &dir.join("trace.svg"))?;
            println!("gate trace written to {}", dir.display());
        }
        Cmd::Probe { model, segments } => {
            let (corpora, _) = ensure_data(&ctx)?;
            let hash = resolve_model_hash(&ctx, &corpora, &model)?;
            let mut store = ctx.store();
            let ck = store.resolve(&hash)?;
            let stitched = load_stitched::<f32>(&ck, &mut store)?;
            let mut segs = Vec::new();
            for name in segments.split(',') {
                let d = Domain::parse(name.trim())
                    .map_err(|e| anyhow!(ConfigErr(e.to_string())))?;
                segs.push((
                    name.trim().to_string(),
                    tokenizer::encode(&corpora.get(d).eval[0]),
                ));
            }
            let (trace, summary) = stitchkit_train::trace::context_switch_probe(
                &stitched,
                &segs,
                &replicate::member_names(),
            )?;
            let dir = ctx.root.join(format!("probe-{}", &hash[..12]));
            std::fs::create_dir_all(&dir)?;
            stitchkit_train::trace::write_csv(&trace, &dir.join("probe.csv"))?;
            stitchkit_train::trace::write_json(&trace, &dir.join("probe.json"))?;
            stitchkit_train::trace::write_svg(&trace, &dir.join("probe.svg"))?;
            for s in &summary {
                println!(
                    "segment {:<8} [{:3}..{:3}) mass {:?}",
                    s.label, s.start, s.end, s.mean_mass
                );
            }
            println!("probe written to {}", dir.display());
        }
        Cmd::Replicate { suite } => {
            let ok = match suite.as_str() {
                "core" => replicate::run_core(&ctx)?.summary.all_pass(),
                "crosscap" => replicate::run_crosscap(&ctx)?.all_pass(),
                "hub" => replicate::run_hub(&ctx)?.all_pass(),
                "all" => {
                    let a = replicate::run_core(&ctx)?.summary.all_pass();
                    let b = replicate::run_crosscap(&ctx)?.all_pass();
                    let c = replicate::run_hub(&ctx)?.all_pass();
                    a && b && c
                }
                other => {
                    return Err(anyhow!(ConfigErr(format!("unknown suite `{other}`"))));
                }
            };
            if !ok {
                return Err(anyhow!("suite {suite}: some assertions failed"));
            }
            println!("suite {suite}: all assertions passed");
        }
    }
    Ok(())
}

/// Resolve a model spec: a role name computed by the pipeline, or a path
/// to a checkpoint directory.
fn resolve_model_hash(
    ctx: &Ctx,
    corpora: &stitchkit_train::corpus::CorpusSet,
    spec: &str,
) -> Result<String> {
    let path = std::path::Path::new(spec);
    if path.join("manifest.json").exists() {
        let ck = stitchkit_core::ckpt::Ckpt::open(path)?;
        return Ok(ck.hash().to_string());
    }
    let (_, seed_hash) = ensure_seed(ctx, corpora)?;
    let expert = |d: Domain| -> Result<String> {
        Ok(ensure_expert(ctx, corpora, &seed_hash, d)?.1)
    };
    let all_members = || -> Result<Vec<String>> {
        let mut m = vec![seed_hash.clone()];
        for d in [Domain::Arith, Domain::Code, Domain::Cipher] {
            m.push(expert(d)?);
        }
        Ok(m)
    };
    match spec {
        "seed" => Ok(seed_hash),
        "expert-arith" => expert(Domain::Arith),
        "expert-code" => expert(Domain::Code),
        "expert-cipher" => expert(Domain::Cipher),
        "bts" => {
            let members = all_members()?;
            Ok(ensure_stitch(
                ctx,
                corpora,
                &members,
                ctx.cfg.stitch_phase.k,
                ctx.cfg.stitch_phase.pattern,
                &ctx.cfg.stitch_phase.mixture.clone(),
                &ctx.cfg.stitch_phase.train,
                "stitch",
            )?
            .ckpt_hash)
        }
        "soup" | "btm" | "router" | "btx-soft" | "bam-adapters" => {
            let members = all_members()?;
            let method = MergeMethod::parse(spec, true)?;
            Ok(ensure_merge(ctx, corpora, &members, &method)?.ckpt_hash)
        }
        other => Err(anyhow!(ConfigErr(format!(
            "unknown model spec `{other}` (role name or checkpoint directory)"
        )))),
    }
}
