//! The training loop shared by every phase: seed pretraining, expert
//! continued pretraining, stitch training, and MoE/adapter training.
//! One AdamW step per batch, loss from the target's own head, all
//! randomness drawn from named substreams of the config seed.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use stitchkit_core::rng::Rng;
use stitchkit_core::tape::Tape;
use stitchkit_model::moe::UpcycledModel;
use stitchkit_model::stitch::StitchedModel;
use stitchkit_model::transformer::TransformerModel;

use crate::error::TrainError;
use crate::optim::AdamW;
use crate::sampler::MixtureSampler;
use crate::schedule::{lr_at, TrainConfig};
use crate::Result;

pub enum TrainTarget<'a> {
    Dense(&'a mut TransformerModel<f32>),
    Stitched(&'a mut StitchedModel<f32>),
    Upcycled(&'a mut UpcycledModel<f32>),
}

impl TrainTarget<'_> {
    fn visit(&self, f: &mut dyn FnMut(&str, &stitchkit_core::PTensor<f32>)) {
        match self {
            TrainTarget::Dense(m) => m.visit_params(f),
            TrainTarget::Stitched(m) => m.visit_stitch_params(f),
            TrainTarget::Upcycled(m) => m.visit_params(f),
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut stitchkit_core::PTensor<f32>)) {
        match self {
            TrainTarget::Dense(m) => m.visit_params_mut(f),
            TrainTarget::Stitched(m) => m.visit_stitch_params_mut(f),
            TrainTarget::Upcycled(m) => m.visit_params_mut(f),
        }
    }

    fn loss(
        &self,
        tape: &mut Tape<f32>,
        tokens: &[u32],
        b: usize,
        t: usize,
        rng: &mut Rng,
    ) -> Result<stitchkit_core::NodeId> {
        Ok(match self {
            TrainTarget::Dense(m) => m.loss(tape, tokens, b, t, true, rng)?,
            TrainTarget::Stitched(m) => m.loss(tape, tokens, b, t, true, rng)?,
            TrainTarget::Upcycled(m) => m.loss(tape, tokens, b, t)?,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub tokens_seen: usize,
}

#[derive(Debug, Clone)]
pub struct TrainStats {
    pub records: Vec<MetricRecord>,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Run the full schedule. Freeze groups are applied before the first
/// step; at least one parameter must remain trainable.
pub fn train(
    target: &mut TrainTarget,
    sampler: &mut MixtureSampler,
    cfg: &TrainConfig,
    log_path: Option<&Path>,
) -> Result<TrainStats> {
    cfg.validate()?;
    if !cfg.freeze_groups.is_empty() {
        let prefixes = cfg.freeze_groups.clone();
        target.visit_mut(&mut |name, p| {
            if prefixes.iter().any(|pre| name.starts_with(pre.as_str())) {
                p.trainable = false;
            }
        });
    }
    let mut n_trainable = 0usize;
    target.visit(&mut |_, p| {
        if p.trainable {
            n_trainable += p.numel();
        }
    });
    if n_trainable == 0 {
        return Err(TrainError::AllFrozen);
    }

    let n_seqs = cfg.seqs_per_batch();
    let t_len = cfg.seq_len + 1;
    let mut opt = AdamW::new(cfg.weight_decay);
    let root_rng = Rng::seeded(cfg.seed);
    let mut log_file = match log_path {
        Some(p) => {
            if let Some(dir) = p.parent() {
                std::fs::create_dir_all(dir)?;
            }
            Some(std::fs::File::create(p)?)
        }
        None => None,
    };

    let mut records = Vec::with_capacity(cfg.total_steps);
    for step in 0..cfg.total_steps {
        let batch = sampler.next_batch(n_seqs);
        let mut tape = Tape::<f32>::new(true);
        let mut step_rng = root_rng.stream_idx("train/step", step as u64);
        let loss_id = target.loss(&mut tape, &batch, n_seqs, t_len, &mut step_rng)?;
        let loss = tape.scalar(loss_id) as f64;
        if !loss.is_finite() {
            let op = tape.first_non_finite().unwrap_or("loss").to_string();
            return Err(TrainError::NaNLoss { step, op });
        }
        let mut grads = tape.backward(loss_id)?;

        // Pull gradients for every trainable parameter staged this step.
        let mut named: Vec<(String, Vec<f32>, usize)> = Vec::new();
        target.visit(&mut |name, p| {
            if !p.trainable {
                return;
            }
            if let Some(id) = tape.leaf_id(p) {
                if let Some(g) = grads.take(id) {
                    named.push((name.to_string(), g, p.shape.len()));
                }
            }
        });
        drop(tape);

        let lr = lr_at(cfg, step + 1)?;
        let clip = crate::optim::clip_scale(named.iter().map(|(_, g, _)| g.as_slice()));
        let mut grad_map: std::collections::BTreeMap<String, (Vec<f32>, usize)> = named
            .into_iter()
            .map(|(n, g, d)| (n, (g, d)))
            .collect();
        opt.begin_step();
        target.visit_mut(&mut |name, p| {
            if let Some((g, nd)) = grad_map.remove(name) {
                opt.step_param(name, p.values_mut(), &g, nd, lr, clip);
            }
        });

        let record = MetricRecord {
            step: step + 1,
            lr,
            loss,
            tokens_seen: (step + 1) * n_seqs * cfg.seq_len,
        };
        if let Some(f) = log_file.as_mut() {
            writeln!(f, "{}", serde_json::to_string(&record)?)?;
        }
        records.push(record);
    }
    Ok(TrainStats {
        initial_loss: records.first().map(|r| r.loss).unwrap_or(f64::NAN),
        final_loss: records.last().map(|r| r.loss).unwrap_or(f64::NAN),
        records,
    })
}
