//! Stitch layers and the stitched hub-and-spoke model.
//!
//! A stitch layer mixes the hidden states of one hub model and n expert
//! models at a fixed depth. Two kinds alternate through the stack:
//!
//! * Experts-into-Hub: expert states are projected into the hub space and
//!   softmax-gated into the hub stream per channel; expert streams pass
//!   through unchanged.
//! * Hub-into-Experts: the hub state is projected into each expert space
//!   and sigmoid-gated into that expert's stream; the hub stream passes
//!   through unchanged.
//!
//! The last stitch layer is always Experts-into-Hub, and the final output
//! is the hub head's logits. Only stitch parameters train; members stay
//! frozen.

use serde::{Deserialize, Serialize};
use stitchkit_core::rng::Rng;
use stitchkit_core::tape::{NodeId, Tape};
use stitchkit_core::tensor::PTensor;
use stitchkit_core::Scalar;

use crate::error::ModelError;
use crate::transformer::TransformerModel;
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StitchKind {
    ExpertsIntoHub,
    HubIntoExperts,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StitchPattern {
    /// Alternate kinds, ending on Experts-into-Hub.
    Alternating,
    /// Every stitch layer is Experts-into-Hub.
    AllExpertsIntoHub,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StitchInit {
    /// Zero projections and gate weights; gate bias biased so the hub
    /// passes through almost unchanged (Experts-into-Hub weight on the hub
    /// >= 0.999, Hub-into-Experts gates ~ 0.001). The stitched model then
    /// matches the hub alone at step 0.
    HubIdentity,
    /// Zero everything: uniform softmax gates, sigmoid gates at 0.5.
    Uniform,
}

/// Per-layer trainable stitch parameters.
#[derive(Debug, Clone)]
pub struct StitchLayer<E: Scalar> {
    pub kind: StitchKind,
    /// One d x d projection per expert.
    pub w_proj: Vec<PTensor<E>>,
    /// Linear gate d -> d*(1+n): per-channel logits over {hub} + experts.
    pub w_gate: PTensor<E>,
    pub gate_bias: PTensor<E>,
    pub dropout_rate: f64,
}

/// Channel-mean gate weights recorded for one stitch layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GateRecord {
    pub position: usize,
    pub kind: StitchKind,
    /// [tokens][1+n] for Experts-into-Hub (column 0 = hub);
    /// [tokens][n] sigmoid means for Hub-into-Experts.
    pub weights: Vec<Vec<f64>>,
}

impl<E: Scalar> StitchLayer<E> {
    pub fn new(
        kind: StitchKind,
        n_experts: usize,
        d_model: usize,
        init: StitchInit,
        dropout_rate: f64,
    ) -> Self {
        let m = 1 + n_experts;
        let mut gate_bias = vec![E::ZERO; d_model * m];
        if init == StitchInit::HubIdentity {
            match kind {
                StitchKind::ExpertsIntoHub => {
                    // softmax weight on hub = 1e5*n/(1e5*n + n) ~= 0.99999
                    let b = E::from_f64((1e5 * n_experts as f64).ln());
                    for ch in 0..d_model {
                        gate_bias[ch * m] = b;
                    }
                }
                StitchKind::HubIntoExperts => {
                    // sigmoid(-ln 999) = 0.001: gates essentially closed
                    let b = E::from_f64(-(999f64).ln());
                    for v in gate_bias.iter_mut() {
                        *v = b;
                    }
                }
            }
        }
        Self {
            kind,
            w_proj: (0..n_experts)
                .map(|_| PTensor::zeros(&[d_model, d_model]))
                .collect(),
            w_gate: PTensor::zeros(&[d_model, d_model * m]),
            gate_bias: PTensor::from_vec(&[d_model * m], gate_bias),
            dropout_rate,
        }
    }

    pub fn n_experts(&self) -> usize {
        self.w_proj.len()
    }

    pub fn param_count(&self) -> usize {
        let mut n = self.w_gate.numel() + self.gate_bias.numel();
        for p in &self.w_proj {
            n += p.numel();
        }
        n
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&str, &PTensor<E>)) {
        for (i, p) in self.w_proj.iter().enumerate() {
            f(&format!("w_proj.{i}"), p);
        }
        f("w_gate", &self.w_gate);
        f("gate_bias", &self.gate_bias);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut PTensor<E>)) {
        for (i, p) in self.w_proj.iter_mut().enumerate() {
            f(&format!("w_proj.{i}"), p);
        }
        f("w_gate", &mut self.w_gate);
        f("gate_bias", &mut self.gate_bias);
    }

    /// Gate activations: [b, t, d, 1+n], softmax or sigmoid over the last
    /// axis depending on kind. Dropout is applied to the gate logits.
    fn gate_values(
        &self,
        tape: &mut Tape<E>,
        h_hub: NodeId,
        b: usize,
        t: usize,
        d: usize,
        training: bool,
        rng: &mut Rng,
    ) -> Result<NodeId> {
        let m = 1 + self.n_experts();
        let wg = tape.leaf(&self.w_gate);
        let bias = tape.leaf(&self.gate_bias);
        let z = tape.matmul(h_hub, wg)?;
        let z = tape.add_bias(z, bias)?;
        let z = tape.reshape(z, &[b, t, d, m])?;
        let z = tape.dropout(z, self.dropout_rate, training, rng)?;
        Ok(match self.kind {
            StitchKind::ExpertsIntoHub => tape.softmax(z, 3)?,
            StitchKind::HubIntoExperts => tape.sigmoid(z),
        })
    }

    /// Apply the stitch. Returns the updated (hub, experts) states and the
    /// gate node for tracing.
    #[allow(clippy::too_many_arguments)]
    pub fn apply(
        &self,
        tape: &mut Tape<E>,
        h_hub: NodeId,
        h_experts: &[NodeId],
        b: usize,
        t: usize,
        training: bool,
        rng: &mut Rng,
    ) -> Result<(NodeId, Vec<NodeId>, NodeId)> {
        let n = self.n_experts();
        if h_experts.len() != n {
            return Err(ModelError::ExpertCountMismatch {
                expected: n,
                got: h_experts.len(),
            });
        }
        let hub_shape = tape.shape(h_hub).to_vec();
        if hub_shape.len() != 3 || hub_shape[0] != b || hub_shape[1] != t {
            return Err(ModelError::Core(stitchkit_core::CoreError::ShapeMismatch {
                op: "stitch",
                lhs: hub_shape,
                rhs: vec![b, t],
            }));
        }
        let d = hub_shape[2];
        let g = self.gate_values(tape, h_hub, b, t, d, training, rng)?;

        let gate_col = |tape: &mut Tape<E>, idx: usize| -> Result<NodeId> {
            let col = tape.slice(g, 3, idx, 1)?;
            Ok(tape.reshape(col, &[b, t, d])?)
        };

        match self.kind {
            StitchKind::ExpertsIntoHub => {
                // h~_hub = g_0 * h_hub + sum_i g_i * proj_i(h_i)
                let g0 = gate_col(tape, 0)?;
                let mut acc = tape.mul(g0, h_hub)?;
                for (i, &he) in h_experts.iter().enumerate() {
                    let w = tape.leaf(&self.w_proj[i]);
                    let proj = tape.matmul(he, w)?;
                    let gi = gate_col(tape, i + 1)?;
                    let term = tape.mul(gi, proj)?;
                    acc = tape.add(acc, term)?;
                }
                Ok((acc, h_experts.to_vec(), g))
            }
            StitchKind::HubIntoExperts => {
                // h~_i = (1 - g_i) * h_i + g_i * proj_i(h_hub)
                //      = h_i + g_i * (proj_i(h_hub) - h_i); hub unchanged.
                let mut outs = Vec::with_capacity(n);
                for (i, &he) in h_experts.iter().enumerate() {
                    let w = tape.leaf(&self.w_proj[i]);
                    let proj = tape.matmul(h_hub, w)?;
                    let delta = tape.sub(proj, he)?;
                    let gi = gate_col(tape, i + 1)?;
                    let upd = tape.mul(gi, delta)?;
                    outs.push(tape.add(he, upd)?);
                }
                Ok((h_hub, outs, g))
            }
        }
    }
}

/// How per-channel gate vectors reduce to the scalar per-member weights
/// reported in gate traces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GateReduction {
    Mean,
    Median,
}

/// Construction report: where the stitches sit and any remainder layers
/// that run after the last stitch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BuildInfo {
    pub positions: Vec<usize>,
    pub kinds: Vec<StitchKind>,
    pub remainder_layers: usize,
}

pub struct StitchedModel<E: Scalar> {
    pub hub: TransformerModel<E>,
    pub experts: Vec<TransformerModel<E>>,
    /// (insert after this many layers, layer), ascending positions.
    pub stitches: Vec<(usize, StitchLayer<E>)>,
    pub info: BuildInfo,
    pub gate_reduction: GateReduction,
}

/// Stitch kinds for K layers: alternation fixed so the last is always
/// Experts-into-Hub.
pub fn kind_schedule(k: usize, pattern: StitchPattern) -> Vec<StitchKind> {
    (1..=k)
        .map(|j| match pattern {
            StitchPattern::AllExpertsIntoHub => StitchKind::ExpertsIntoHub,
            StitchPattern::Alternating => {
                if (k - j) % 2 == 0 {
                    StitchKind::ExpertsIntoHub
                } else {
                    StitchKind::HubIntoExperts
                }
            }
        })
        .collect()
}

impl<E: Scalar> StitchedModel<E> {
    /// Assemble a stitched model from a hub and n experts. Member weights
    /// are frozen; stitch layers are inserted after every floor(L/K)
    /// layers with the given kind pattern.
    pub fn build(
        hub: TransformerModel<E>,
        experts: Vec<TransformerModel<E>>,
        k: usize,
        pattern: StitchPattern,
        init: StitchInit,
        dropout_rate: f64,
    ) -> Result<Self> {
        let l = hub.config.n_layers;
        if k == 0 || k > l {
            return Err(ModelError::BadK { k, n_layers: l });
        }
        if experts.is_empty() {
            return Err(ModelError::ExpertCountMismatch {
                expected: 1,
                got: 0,
            });
        }
        for (i, e) in experts.iter().enumerate() {
            let (a, b) = (&hub.config, &e.config);
            if a.n_layers != b.n_layers || a.d_model != b.d_model || a.vocab_size != b.vocab_size {
                return Err(ModelError::IncompatibleConfigs(format!(
                    "expert {i}: layers/d_model/vocab ({}, {}, {}) vs hub ({}, {}, {})",
                    b.n_layers, b.d_model, b.vocab_size, a.n_layers, a.d_model, a.vocab_size
                )));
            }
        }
        let stride = l / k;
        let positions: Vec<usize> = (1..=k).map(|j| j * stride).collect();
        let kinds = kind_schedule(k, pattern);
        let remainder = l - stride * k;

        let mut hub = hub;
        hub.set_trainable(false);
        let mut experts = experts;
        for e in &mut experts {
            e.set_trainable(false);
        }
        let n = experts.len();
        let d = hub.config.d_model;
        let stitches = positions
            .iter()
            .zip(&kinds)
            .map(|(&p, &kind)| (p, StitchLayer::new(kind, n, d, init, dropout_rate)))
            .collect();
        Ok(Self {
            hub,
            experts,
            stitches,
            info: BuildInfo {
                positions,
                kinds,
                remainder_layers: remainder,
            },
            gate_reduction: GateReduction::Mean,
        })
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn members(&self) -> impl Iterator<Item = &TransformerModel<E>> {
        std::iter::once(&self.hub).chain(self.experts.iter())
    }

    /// Trainable parameters: K * (n*d^2 + d*d*(1+n) + d*(1+n)).
    pub fn trainable_param_count(&self) -> usize {
        self.stitches.iter().map(|(_, s)| s.param_count()).sum()
    }

    pub fn expected_trainable_param_count(&self) -> usize {
        let d = self.hub.config.d_model;
        let n = self.n_experts();
        let k = self.stitches.len();
        k * (n * d * d + d * d * (1 + n) + d * (1 + n))
    }

    pub fn visit_stitch_params(&self, f: &mut dyn FnMut(&str, &PTensor<E>)) {
        for (i, (pos, s)) in self.stitches.iter().enumerate() {
            let prefix = format!("stitches.{i}.pos{pos}");
            s.visit_params(&mut |name, p| f(&format!("{prefix}.{name}"), p));
        }
    }

    pub fn visit_stitch_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut PTensor<E>)) {
        for (i, (pos, s)) in self.stitches.iter_mut().enumerate() {
            let prefix = format!("stitches.{i}.pos{pos}");
            s.visit_params_mut(&mut |name, p| f(&format!("{prefix}.{name}"), p));
        }
    }

    /// sha256 per member tensor, for the freeze invariant.
    pub fn member_tensor_hashes(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        for (m, model) in self.members().enumerate() {
            let role = if m == 0 {
                "hub".to_string()
            } else {
                format!("expert_{}", m - 1)
            };
            for (name, h) in model.tensor_hashes() {
                out.push((format!("{role}.{name}"), h));
            }
        }
        out
    }

    /// Run all members segment by segment, stitching between segments.
    /// Returns hub-head logits and, when `trace` is set, the per-layer
    /// channel-mean gate weights.
    pub fn forward(
        &self,
        tape: &mut Tape<E>,
        tokens: &[u32],
        b: usize,
        t: usize,
        training: bool,
        rng: &mut Rng,
        trace: bool,
    ) -> Result<(NodeId, Option<Vec<GateRecord>>)> {
        let l = self.hub.config.n_layers;
        let mut h_hub: Option<NodeId> = None;
        let mut h_exp: Vec<Option<NodeId>> = vec![None; self.n_experts()];
        let mut from = 0usize;
        let mut records = Vec::new();

        for (si, (pos, stitch)) in self.stitches.iter().enumerate() {
            let mut hub_rng = rng.stream_idx("member/hub", si as u64);
            let h = self.hub.forward_layers(
                tape, tokens, b, t, from, *pos, h_hub, training, &mut hub_rng,
            )?;
            let mut exps = Vec::with_capacity(self.n_experts());
            for (ei, expert) in self.experts.iter().enumerate() {
                let mut e_rng = rng.stream_idx("member/expert", (si * 97 + ei) as u64);
                exps.push(expert.forward_layers(
                    tape, tokens, b, t, from, *pos, h_exp[ei], training, &mut e_rng,
                )?);
            }
            let mut s_rng = rng.stream_idx("stitch", si as u64);
            let (nh, nexps, gate) =
                stitch.apply(tape, h, &exps, b, t, training, &mut s_rng)?;
            if trace {
                records.push(gate_record(
                    tape,
                    gate,
                    stitch.kind,
                    *pos,
                    b,
                    t,
                    self.gate_reduction,
                ));
            }
            h_hub = Some(nh);
            for (slot, v) in h_exp.iter_mut().zip(nexps) {
                *slot = Some(v);
            }
            from = *pos;
        }

        // Remainder layers (only when L is not divisible by K) run after
        // the last stitch, before the head.
        if from < l {
            let mut hub_rng = rng.stream("member/hub-tail");
            h_hub = Some(self.hub.forward_layers(
                tape, tokens, b, t, from, l, h_hub, training, &mut hub_rng,
            )?);
        }
        let logits = self.hub.head_logits(tape, h_hub.expect("k >= 1"))?;
        Ok((logits, trace.then_some(records)))
    }

    /// Hub-head next-token loss over a [b, t] batch.
    pub fn loss(
        &self,
        tape: &mut Tape<E>,
        tokens: &[u32],
        b: usize,
        t: usize,
        training: bool,
        rng: &mut Rng,
    ) -> Result<NodeId> {
        if t < 2 {
            return Err(ModelError::SequenceTooShort { len: t });
        }
        let mut inputs = Vec::with_capacity(b * (t - 1));
        let mut targets = Vec::with_capacity(b * (t - 1));
        for row in 0..b {
            inputs.extend_from_slice(&tokens[row * t..row * t + t - 1]);
            targets.extend_from_slice(&tokens[row * t + 1..row * t + t]);
        }
        let (logits, _) = self.forward(tape, &inputs, b, t - 1, training, rng, false)?;
        let flat = tape.reshape(logits, &[b * (t - 1), self.hub.config.vocab_size])?;
        Ok(tape.cross_entropy(flat, &targets, None)?)
    }
}

/// Channel reduction of a gate node [b,t,d,1+n] into per-token member
/// weights. Experts-into-Hub keeps all 1+n columns (channel means sum to
/// 1); Hub-into-Experts keeps the n expert columns.
fn gate_record<E: Scalar>(
    tape: &Tape<E>,
    gate: NodeId,
    kind: StitchKind,
    position: usize,
    b: usize,
    t: usize,
    reduction: GateReduction,
) -> GateRecord {
    let shape = tape.shape(gate).to_vec();
    let (d, m) = (shape[2], shape[3]);
    let v = tape.value(gate);
    let mut weights = Vec::with_capacity(b * t);
    let mut scratch = Vec::with_capacity(d);
    for row in 0..b * t {
        let base = row * d * m;
        let cols = match kind {
            StitchKind::ExpertsIntoHub => 0..m,
            StitchKind::HubIntoExperts => 1..m,
        };
        let mut reduced = Vec::with_capacity(cols.len());
        for c in cols {
            scratch.clear();
            for ch in 0..d {
                scratch.push(v[base + ch * m + c].to_f64());
            }
            let w = match reduction {
                GateReduction::Mean => scratch.iter().sum::<f64>() / d as f64,
                GateReduction::Median => {
                    scratch.sort_by(|a, b| a.partial_cmp(b).unwrap());
                    if d % 2 == 1 {
                        scratch[d / 2]
                    } else {
                        0.5 * (scratch[d / 2 - 1] + scratch[d / 2])
                    }
                }
            };
            reduced.push(w);
        }
        weights.push(reduced);
    }
    GateRecord {
        position,
        kind,
        weights,
    }
}
