//! Save/load for every model kind over the shared checkpoint format.
//!
//! Dense and upcycled models store all tensors. Stitched checkpoints store
//! only stitch parameters plus a members table referencing the frozen
//! member checkpoints by hash; loading resolves members through a
//! [`CkptStore`]. Router and BTM checkpoints likewise reference members.

use std::path::Path;

use serde::{Deserialize, Serialize};
use stitchkit_core::ckpt::{Ckpt, CkptStore, CkptWriter};
use stitchkit_core::Scalar;

use crate::error::ModelError;
use crate::lm::{AnyModel, RoutedEnsemble};
use crate::merge::{BtmEnsemble, SequenceRouter};
use crate::moe::{upcycle_moe, UpcycledModel};
use crate::stitch::{StitchKind, StitchLayer, StitchedModel};
use crate::transformer::TransformerModel;
use crate::{ModelConfig, Result, StitchInit, StitchPattern};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MemberRef {
    pub role: String,
    pub hash: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StitchEntry {
    pub position: usize,
    pub kind: StitchKind,
    pub tensors: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StitchedMeta {
    pub members: Vec<MemberRef>,
    pub stitches: Vec<StitchEntry>,
    pub pattern: StitchPattern,
    pub dropout_rate: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MoeMeta {
    pub members: Vec<MemberRef>,
    pub with_attention: bool,
    pub with_adapters: bool,
    pub members_frozen: bool,
    pub top_k: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RouterMeta {
    pub members: Vec<MemberRef>,
    pub t_min: usize,
    pub t_max: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BtmMeta {
    pub members: Vec<MemberRef>,
}

pub fn save_dense<E: Scalar>(
    dir: &Path,
    model: &TransformerModel<E>,
    phase: &str,
    parent: Option<&str>,
) -> Result<String> {
    let mut w = CkptWriter::new("dense", phase);
    w.parent = parent.map(str::to_string);
    w.config = serde_json::to_value(&model.config).map_err(stitchkit_core::CoreError::from)?;
    model.visit_params(&mut |name, p| w.add_tensor(name, p));
    Ok(w.write(dir).map_err(ModelError::Core)?)
}

pub fn load_dense<E: Scalar>(ckpt: &Ckpt) -> Result<TransformerModel<E>> {
    if ckpt.manifest.kind != "dense" {
        return Err(ModelError::UnknownModelSpec(format!(
            "expected dense checkpoint, got `{}`",
            ckpt.manifest.kind
        )));
    }
    let config: ModelConfig = serde_json::from_value(ckpt.manifest.config.clone())
        .map_err(stitchkit_core::CoreError::from)?;
    let mut model = TransformerModel::init(&config, &stitchkit_core::Rng::seeded(0))?;
    let mut err = None;
    model.visit_params_mut(&mut |name, p| {
        if err.is_some() {
            return;
        }
        match ckpt.load_tensor::<E>(name) {
            Ok(mut t) => {
                t.trainable = true;
                if t.shape != p.shape {
                    err = Some(ModelError::IncompatibleCheckpoints(format!(
                        "tensor `{name}` shape {:?} != expected {:?}",
                        t.shape, p.shape
                    )));
                } else {
                    *p = t;
                }
            }
            Err(e) => err = Some(ModelError::Core(e)),
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(model),
    }
}

#[allow(clippy::too_many_arguments)]
pub fn save_stitched<E: Scalar>(
    dir: &Path,
    model: &StitchedModel<E>,
    phase: &str,
    parent: Option<&str>,
    member_hashes: &[String],
) -> Result<String> {
    let mut w = CkptWriter::new("stitched", phase);
    w.parent = parent.map(str::to_string);
    w.config =
        serde_json::to_value(&model.hub.config).map_err(stitchkit_core::CoreError::from)?;
    let members: Vec<MemberRef> = member_hashes
        .iter()
        .enumerate()
        .map(|(i, h)| MemberRef {
            role: if i == 0 {
                "hub".into()
            } else {
                format!("expert_{}", i - 1)
            },
            hash: h.clone(),
        })
        .collect();
    let mut stitches = Vec::new();
    for (i, (pos, s)) in model.stitches.iter().enumerate() {
        let mut tensors = Vec::new();
        s.visit_params(&mut |name, p| {
            let full = format!("stitches.{i}.pos{pos}.{name}");
            w.add_tensor(&full, p);
            tensors.push(full);
        });
        stitches.push(StitchEntry {
            position: *pos,
            kind: s.kind,
            tensors,
        });
    }
    let pattern = if model
        .info
        .kinds
        .iter()
        .all(|k| *k == StitchKind::ExpertsIntoHub)
        && model.info.kinds.len() > 1
    {
        StitchPattern::AllExpertsIntoHub
    } else {
        StitchPattern::Alternating
    };
    w.meta = serde_json::to_value(StitchedMeta {
        members,
        stitches,
        pattern,
        dropout_rate: model
            .stitches
            .first()
            .map(|(_, s)| s.dropout_rate)
            .unwrap_or(0.0),
    })
    .map_err(stitchkit_core::CoreError::from)?;
    Ok(w.write(dir).map_err(ModelError::Core)?)
}

pub fn load_stitched<E: Scalar>(ckpt: &Ckpt, store: &mut CkptStore) -> Result<StitchedModel<E>> {
    let meta: StitchedMeta = serde_json::from_value(ckpt.manifest.meta.clone())
        .map_err(stitchkit_core::CoreError::from)?;
    let mut members = Vec::with_capacity(meta.members.len());
    for m in &meta.members {
        let c = store.resolve(&m.hash).map_err(ModelError::Core)?;
        members.push(load_dense::<E>(&c)?);
    }
    if members.is_empty() {
        return Err(ModelError::IncompatibleCheckpoints(
            "stitched checkpoint lists no members".into(),
        ));
    }
    let hub = members.remove(0);
    let k = meta.stitches.len();
    let mut model = StitchedModel::build(
        hub,
        members,
        k.max(1),
        meta.pattern,
        StitchInit::Uniform,
        meta.dropout_rate,
    )?;
    // Restore recorded positions/kinds and fill parameters.
    for (i, entry) in meta.stitches.iter().enumerate() {
        let n = model.n_experts();
        let d = model.hub.config.d_model;
        let mut layer = StitchLayer::<E>::new(
            entry.kind,
            n,
            d,
            StitchInit::Uniform,
            meta.dropout_rate,
        );
        let prefix = format!("stitches.{i}.pos{}", entry.position);
        let mut err = None;
        layer.visit_params_mut(&mut |name, p| {
            if err.is_some() {
                return;
            }
            match ckpt.load_tensor::<E>(&format!("{prefix}.{name}")) {
                Ok(mut t) => {
                    t.trainable = true;
                    *p = t;
                }
                Err(e) => err = Some(ModelError::Core(e)),
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        model.stitches[i] = (entry.position, layer);
    }
    model.info.positions = meta.stitches.iter().map(|s| s.position).collect();
    model.info.kinds = meta.stitches.iter().map(|s| s.kind).collect();
    Ok(model)
}

pub fn save_moe<E: Scalar>(
    dir: &Path,
    model: &UpcycledModel<E>,
    phase: &str,
    parent: Option<&str>,
    member_hashes: &[String],
) -> Result<String> {
    let mut w = CkptWriter::new("moe", phase);
    w.parent = parent.map(str::to_string);
    w.config = serde_json::to_value(&model.config).map_err(stitchkit_core::CoreError::from)?;
    w.meta = serde_json::to_value(MoeMeta {
        members: member_hashes
            .iter()
            .enumerate()
            .map(|(i, h)| MemberRef {
                role: if i == 0 {
                    "seed".into()
                } else {
                    format!("expert_{}", i - 1)
                },
                hash: h.clone(),
            })
            .collect(),
        with_attention: model.with_attention,
        with_adapters: model.with_adapters,
        members_frozen: model.members_frozen,
        top_k: model.top_k,
    })
    .map_err(stitchkit_core::CoreError::from)?;
    model.visit_params(&mut |name, p| w.add_tensor(name, p));
    Ok(w.write(dir).map_err(ModelError::Core)?)
}

pub fn load_moe<E: Scalar>(ckpt: &Ckpt, store: &mut CkptStore) -> Result<UpcycledModel<E>> {
    let meta: MoeMeta = serde_json::from_value(ckpt.manifest.meta.clone())
        .map_err(stitchkit_core::CoreError::from)?;
    // Rebuild the structure from the original members, then overwrite every
    // tensor from the checkpoint.
    let mut members = Vec::with_capacity(meta.members.len());
    for m in &meta.members {
        let c = store.resolve(&m.hash).map_err(ModelError::Core)?;
        members.push(load_dense::<E>(&c)?);
    }
    let refs: Vec<&TransformerModel<E>> = members.iter().collect();
    let mut model = upcycle_moe(
        &refs,
        meta.with_attention,
        meta.with_adapters,
        meta.members_frozen,
        meta.top_k,
    )?;
    let mut err = None;
    model.visit_params_mut(&mut |name, p| {
        if err.is_some() {
            return;
        }
        match ckpt.load_tensor::<E>(name) {
            Ok(mut t) => {
                t.trainable = p.trainable;
                *p = t;
            }
            Err(e) => err = Some(ModelError::Core(e)),
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(model),
    }
}

pub fn save_router<E: Scalar>(
    dir: &Path,
    router: &SequenceRouter<E>,
    phase: &str,
    member_hashes: &[String],
) -> Result<String> {
    let mut w = CkptWriter::new("router", phase);
    w.meta = serde_json::to_value(RouterMeta {
        members: member_hashes
            .iter()
            .enumerate()
            .map(|(i, h)| MemberRef {
                role: format!("member_{i}"),
                hash: h.clone(),
            })
            .collect(),
        t_min: router.t_min,
        t_max: router.t_max,
    })
    .map_err(stitchkit_core::CoreError::from)?;
    w.add_tensor("router.weight", &router.weight);
    Ok(w.write(dir).map_err(ModelError::Core)?)
}

pub fn save_btm_spec(dir: &Path, member_hashes: &[String]) -> Result<String> {
    let mut w = CkptWriter::new("btm", "baseline-merge");
    w.meta = serde_json::to_value(BtmMeta {
        members: member_hashes
            .iter()
            .enumerate()
            .map(|(i, h)| MemberRef {
                role: format!("member_{i}"),
                hash: h.clone(),
            })
            .collect(),
    })
    .map_err(stitchkit_core::CoreError::from)?;
    Ok(w.write(dir).map_err(ModelError::Core)?)
}

/// Load any checkpoint kind into the uniform evaluation surface.
pub fn load_any(dir: &Path, store: &mut CkptStore) -> Result<AnyModel<f32>> {
    let ckpt = Ckpt::open(dir).map_err(ModelError::Core)?;
    match ckpt.manifest.kind.as_str() {
        "dense" => Ok(AnyModel::Dense(load_dense(&ckpt)?)),
        "stitched" => Ok(AnyModel::Stitched(load_stitched(&ckpt, store)?)),
        "moe" => Ok(AnyModel::Upcycled(load_moe(&ckpt, store)?)),
        "btm" => {
            let meta: BtmMeta = serde_json::from_value(ckpt.manifest.meta.clone())
                .map_err(stitchkit_core::CoreError::from)?;
            let mut members = Vec::new();
            for m in &meta.members {
                let c = store.resolve(&m.hash).map_err(ModelError::Core)?;
                members.push(load_dense::<f32>(&c)?);
            }
            Ok(AnyModel::Btm(BtmEnsemble::new(members)?))
        }
        "router" => {
            let meta: RouterMeta = serde_json::from_value(ckpt.manifest.meta.clone())
                .map_err(stitchkit_core::CoreError::from)?;
            let mut members = Vec::new();
            for m in &meta.members {
                let c = store.resolve(&m.hash).map_err(ModelError::Core)?;
                members.push(load_dense::<f32>(&c)?);
            }
            let weight = ckpt.load_tensor::<f32>("router.weight")?;
            Ok(AnyModel::Routed(RoutedEnsemble {
                members,
                router: SequenceRouter {
                    weight,
                    t_min: meta.t_min,
                    t_max: meta.t_max,
                },
            }))
        }
        other => Err(ModelError::UnknownModelSpec(other.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use stitchkit_core::tensor::PTensor;
    use stitchkit_core::Rng;

    #[test]
    fn dense_round_trip_is_bit_exact() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = ModelConfig::micro(2);
        let m = TransformerModel::<f32>::init(&cfg, &Rng::seeded(11)).unwrap();
        let h1 = save_dense(&tmp.path().join("a"), &m, "seed", None).unwrap();
        let ck = Ckpt::open(&tmp.path().join("a")).unwrap();
        let loaded = load_dense::<f32>(&ck).unwrap();
        assert_eq!(loaded.tensor_hashes(), m.tensor_hashes());
        // Re-saving the loaded model reproduces the same content hash.
        let h2 = save_dense(&tmp.path().join("b"), &loaded, "seed", None).unwrap();
        assert_eq!(h1, h2);
    }

    #[test]
    fn stitched_round_trip_restores_structure_and_weights() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = ModelConfig::micro(4);
        let hub = TransformerModel::<f32>::init(&cfg, &Rng::seeded(20)).unwrap();
        let e1 = TransformerModel::<f32>::init(&cfg, &Rng::seeded(21)).unwrap();
        let e2 = TransformerModel::<f32>::init(&cfg, &Rng::seeded(22)).unwrap();
        let hub_hash = save_dense(&tmp.path().join("hub"), &hub, "seed", None).unwrap();
        let h1 = save_dense(&tmp.path().join("e1"), &e1, "expert", None).unwrap();
        let h2 = save_dense(&tmp.path().join("e2"), &e2, "expert", None).unwrap();

        let mut stitched = StitchedModel::build(
            hub,
            vec![e1, e2],
            2,
            StitchPattern::Alternating,
            StitchInit::HubIdentity,
            0.1,
        )
        .unwrap();
        let mut rng = Rng::seeded(23).stream("rand");
        stitched.visit_stitch_params_mut(&mut |_, p| {
            let shape = p.shape.clone();
            *p = PTensor::randn(&shape, 0.4, &mut rng);
        });
        let members = vec![hub_hash, h1, h2];
        save_stitched(&tmp.path().join("st"), &stitched, "stitch", None, &members).unwrap();

        let mut store = CkptStore::new(tmp.path());
        let ck = Ckpt::open(&tmp.path().join("st")).unwrap();
        let loaded = load_stitched::<f32>(&ck, &mut store).unwrap();
        assert_eq!(loaded.info.positions, stitched.info.positions);
        assert_eq!(loaded.info.kinds, stitched.info.kinds);
        assert_eq!(
            loaded.member_tensor_hashes(),
            stitched.member_tensor_hashes()
        );
        // Same stitch weights -> same forward output.
        let tokens = vec![1u32, 2, 3, 4, 5, 6];
        let mut t1 = stitchkit_core::tape::Tape::<f32>::new(false);
        let mut r = Rng::seeded(0);
        let (a, _) = stitched.forward(&mut t1, &tokens, 1, 6, false, &mut r, false).unwrap();
        let mut t2 = stitchkit_core::tape::Tape::<f32>::new(false);
        let (b, _) = loaded.forward(&mut t2, &tokens, 1, 6, false, &mut r, false).unwrap();
        assert_eq!(t1.value(a), t2.value(b));
    }

    #[test]
    fn moe_round_trip_preserves_outputs() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = ModelConfig::micro(2);
        let ms: Vec<TransformerModel<f32>> = (0..3)
            .map(|i| TransformerModel::init(&cfg, &Rng::seeded(30 + i)).unwrap())
            .collect();
        let hashes: Vec<String> = ms
            .iter()
            .enumerate()
            .map(|(i, m)| {
                save_dense(&tmp.path().join(format!("m{i}")), m, "expert", None).unwrap()
            })
            .collect();
        let refs: Vec<&TransformerModel<f32>> = ms.iter().collect();
        let up = upcycle_moe(&refs, true, true, true, None).unwrap();
        save_moe(&tmp.path().join("moe"), &up, "baseline-merge", None, &hashes).unwrap();
        let mut store = CkptStore::new(tmp.path());
        let ck = Ckpt::open(&tmp.path().join("moe")).unwrap();
        let loaded = load_moe::<f32>(&ck, &mut store).unwrap();
        let tokens = vec![3u32, 1, 4, 1];
        let mut t1 = stitchkit_core::tape::Tape::<f32>::new(false);
        let a = up.logits(&mut t1, &tokens, 1, 4).unwrap();
        let mut t2 = stitchkit_core::tape::Tape::<f32>::new(false);
        let b = loaded.logits(&mut t2, &tokens, 1, 4).unwrap();
        assert_eq!(t1.value(a), t2.value(b));
        assert_eq!(loaded.members_frozen, true);
        assert_eq!(loaded.top_k, None);
    }
}
