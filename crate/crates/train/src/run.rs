//! Content-addressed run directories and run manifests.
//!
//! A run directory is named by the first 12 hex digits of sha256 over the
//! resolved config plus parent hashes and seed, so ablation matrices reuse
//! shared upstream phases without recomputation. Directories are
//! write-once: a completed manifest short-circuits re-execution.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::TrainError;
use crate::Result;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    /// seed | expert | stitch | baseline-merge | router | eval | data
    pub phase: String,
    pub parent: Option<String>,
    pub data_spec: serde_json::Value,
    pub config: serde_json::Value,
    pub seed: u64,
    pub config_hash: String,
    /// Named outputs, e.g. "ckpt" -> checkpoint hash.
    pub outputs: BTreeMap<String, String>,
    pub complete: bool,
}

/// 12-hex content hash over (phase, resolved config, parents, seed).
pub fn config_hash(
    phase: &str,
    config: &serde_json::Value,
    parents: &[&str],
    seed: u64,
) -> String {
    let mut hasher = Sha256::new();
    hasher.update(phase.as_bytes());
    hasher.update(serde_json::to_string(config).expect("config serializes"));
    for p in parents {
        hasher.update(p.as_bytes());
    }
    hasher.update(seed.to_le_bytes());
    let digest = hasher.finalize();
    digest[..6].iter().map(|b| format!("{b:02x}")).collect()
}

pub struct RunDir {
    pub path: PathBuf,
    pub hash: String,
}

impl RunDir {
    pub fn create(
        root: &Path,
        phase: &str,
        config: &serde_json::Value,
        parents: &[&str],
        seed: u64,
    ) -> Result<Self> {
        let hash = config_hash(phase, config, parents, seed);
        let path = root.join(format!("{phase}-{hash}"));
        fs::create_dir_all(&path)?;
        fs::write(
            path.join("resolved_config.json"),
            serde_json::to_vec_pretty(config)?,
        )?;
        Ok(Self { path, hash })
    }

    /// An existing completed manifest, if this run already happened.
    pub fn existing_manifest(&self) -> Option<RunManifest> {
        let bytes = fs::read(self.path.join("manifest.json")).ok()?;
        let m: RunManifest = serde_json::from_slice(&bytes).ok()?;
        m.complete.then_some(m)
    }

    pub fn write_manifest(&self, manifest: &RunManifest) -> Result<()> {
        fs::write(
            self.path.join("manifest.json"),
            serde_json::to_vec_pretty(manifest)?,
        )?;
        Ok(())
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.path.join("metrics.jsonl")
    }

    pub fn ckpt_dir(&self) -> PathBuf {
        self.path.join("ckpt")
    }
}

/// The branch step: n expert run manifests, all pointing at the seed
/// checkpoint, each with its own data mixture.
pub fn branch(
    seed_ckpt_hash: &str,
    mixtures: &[(String, serde_json::Value)],
    seed: u64,
) -> Result<Vec<RunManifest>> {
    if mixtures.is_empty() {
        return Err(TrainError::BadN(0));
    }
    Ok(mixtures
        .iter()
        .map(|(name, spec)| {
            let config = serde_json::json!({ "expert": name, "mixture": spec });
            RunManifest {
                phase: "expert".into(),
                parent: Some(seed_ckpt_hash.to_string()),
                data_spec: spec.clone(),
                config_hash: config_hash("expert", &config, &[seed_ckpt_hash], seed),
                config,
                seed,
                outputs: BTreeMap::new(),
                complete: false,
            }
        })
        .collect())
}

/// Follow parent hashes back to the root of a lineage.
pub fn provenance_chain(
    store: &mut stitchkit_core::ckpt::CkptStore,
    leaf_hash: &str,
) -> Result<Vec<String>> {
    let mut chain = vec![leaf_hash.to_string()];
    let mut current = leaf_hash.to_string();
    for _ in 0..64 {
        let ck = store.resolve(&current)?;
        match &ck.manifest.parent {
            Some(p) => {
                chain.push(p.clone());
                current = p.clone();
            }
            None => return Ok(chain),
        }
    }
    Err(TrainError::BadParams("provenance chain too deep".into()))
}
