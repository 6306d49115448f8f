//! Expert upcycling: seed + experts turned into a mixture-of-experts model.
//!
//! Each layer's FFN is replaced by an MoE over the members' FFNs behind a
//! fresh linear router (soft routing by default, optional top-k). With
//! `with_attention` the attention sublayer likewise becomes a mixture of
//! the members' attention blocks. Non-expert parameters (embedding, norms,
//! head) are initialized by averaging the members. Optional per-expert
//! output adapters are identity-initialized; training only the routers and
//! adapters with members frozen gives the adapters variant.

use stitchkit_core::rng::Rng;
use stitchkit_core::tape::{NodeId, Tape};
use stitchkit_core::tensor::PTensor;
use stitchkit_core::Scalar;

use crate::config::ModelConfig;
use crate::error::ModelError;
use crate::transformer::{attn_forward, ffn_forward, Decode, TransformerModel, RMS_EPS};
use crate::Result;

#[derive(Debug, Clone)]
pub struct FfnExpert<E: Scalar> {
    pub w_gate: PTensor<E>,
    pub w_up: PTensor<E>,
    pub w_down: PTensor<E>,
}

#[derive(Debug, Clone)]
pub struct AttnExpert<E: Scalar> {
    pub wq: PTensor<E>,
    pub wk: PTensor<E>,
    pub wv: PTensor<E>,
    pub wo: PTensor<E>,
}

/// FFN mixture: router logits over 1+n members, softmax (optionally
/// restricted to the top-k logits and renormalized).
#[derive(Debug, Clone)]
pub struct MoeLayer<E: Scalar> {
    pub router: PTensor<E>,
    pub router_bias: PTensor<E>,
    pub ffns: Vec<FfnExpert<E>>,
    pub adapters: Option<Vec<PTensor<E>>>,
}

#[derive(Debug, Clone)]
pub struct MoaLayer<E: Scalar> {
    pub router: PTensor<E>,
    pub router_bias: PTensor<E>,
    pub attns: Vec<AttnExpert<E>>,
    pub adapters: Option<Vec<PTensor<E>>>,
}

#[derive(Debug, Clone)]
pub enum UpAttn<E: Scalar> {
    /// Averaged dense attention (FFN-only upcycling).
    Dense(AttnExpert<E>),
    /// Mixture of attention experts.
    Moa(MoaLayer<E>),
}

#[derive(Debug, Clone)]
pub struct UpLayer<E: Scalar> {
    pub attn_norm: PTensor<E>,
    pub attn: UpAttn<E>,
    pub ffn_norm: PTensor<E>,
    pub moe: MoeLayer<E>,
}

#[derive(Debug, Clone)]
pub struct UpcycledModel<E: Scalar> {
    pub config: ModelConfig,
    pub embed: PTensor<E>,
    pub layers: Vec<UpLayer<E>>,
    pub final_norm: PTensor<E>,
    pub head: PTensor<E>,
    /// None = soft routing (all members active); Some(k) = renormalized
    /// top-k routing.
    pub top_k: Option<usize>,
    pub with_attention: bool,
    pub with_adapters: bool,
    pub members_frozen: bool,
}

fn mean_tensors<E: Scalar>(tensors: &[&PTensor<E>]) -> PTensor<E> {
    let n = tensors.len();
    let mut data = vec![E::ZERO; tensors[0].numel()];
    for t in tensors {
        for (acc, &v) in data.iter_mut().zip(t.data.iter()) {
            *acc += v;
        }
    }
    let inv = E::from_f64(1.0 / n as f64);
    for v in data.iter_mut() {
        *v = *v * inv;
    }
    PTensor::from_vec(&tensors[0].shape, data)
}

/// Build an upcycled MoE from a seed and its experts. `members[0]` is the
/// seed by convention; all members become FFN (and optionally attention)
/// experts.
pub fn upcycle_moe<E: Scalar>(
    members: &[&TransformerModel<E>],
    with_attention: bool,
    with_adapters: bool,
    freeze_members: bool,
    top_k: Option<usize>,
) -> Result<UpcycledModel<E>> {
    if members.len() < 2 {
        return Err(ModelError::IncompatibleConfigs(
            "upcycling needs a seed plus at least one expert".into(),
        ));
    }
    let cfg = members[0].config.clone();
    for (i, m) in members.iter().enumerate() {
        if m.config != cfg {
            return Err(ModelError::IncompatibleConfigs(format!(
                "member {i} config differs from seed"
            )));
        }
    }
    if let Some(k) = top_k {
        if k == 0 || k > members.len() {
            return Err(ModelError::IncompatibleConfigs(format!(
                "top_k {k} out of range for {} members",
                members.len()
            )));
        }
    }
    let d = cfg.d_model;
    let n_members = members.len();

    let layers = (0..cfg.n_layers)
        .map(|l| {
            let blocks: Vec<_> = members.iter().map(|m| &m.layers[l]).collect();
            let attn = if with_attention {
                UpAttn::Moa(MoaLayer {
                    router: PTensor::zeros(&[d, n_members]),
                    router_bias: PTensor::zeros(&[n_members]),
                    attns: blocks
                        .iter()
                        .map(|b| AttnExpert {
                            wq: b.wq.clone(),
                            wk: b.wk.clone(),
                            wv: b.wv.clone(),
                            wo: b.wo.clone(),
                        })
                        .collect(),
                    adapters: with_adapters
                        .then(|| (0..n_members).map(|_| PTensor::identity(d)).collect()),
                })
            } else {
                UpAttn::Dense(AttnExpert {
                    wq: mean_tensors(&blocks.iter().map(|b| &b.wq).collect::<Vec<_>>()),
                    wk: mean_tensors(&blocks.iter().map(|b| &b.wk).collect::<Vec<_>>()),
                    wv: mean_tensors(&blocks.iter().map(|b| &b.wv).collect::<Vec<_>>()),
                    wo: mean_tensors(&blocks.iter().map(|b| &b.wo).collect::<Vec<_>>()),
                })
            };
            UpLayer {
                attn_norm: mean_tensors(&blocks.iter().map(|b| &b.attn_norm).collect::<Vec<_>>()),
                attn,
                ffn_norm: mean_tensors(&blocks.iter().map(|b| &b.ffn_norm).collect::<Vec<_>>()),
                moe: MoeLayer {
                    router: PTensor::zeros(&[d, n_members]),
                    router_bias: PTensor::zeros(&[n_members]),
                    ffns: blocks
                        .iter()
                        .map(|b| FfnExpert {
                            w_gate: b.w_gate.clone(),
                            w_up: b.w_up.clone(),
                            w_down: b.w_down.clone(),
                        })
                        .collect(),
                    adapters: with_adapters
                        .then(|| (0..n_members).map(|_| PTensor::identity(d)).collect()),
                },
            }
        })
        .collect();

    let mut model = UpcycledModel {
        config: cfg,
        embed: mean_tensors(&members.iter().map(|m| &m.embed).collect::<Vec<_>>()),
        layers,
        final_norm: mean_tensors(&members.iter().map(|m| &m.final_norm).collect::<Vec<_>>()),
        head: mean_tensors(&members.iter().map(|m| &m.head).collect::<Vec<_>>()),
        top_k,
        with_attention,
        with_adapters,
        members_frozen: freeze_members,
    };
    if freeze_members {
        // Everything except routers and adapters stays frozen.
        model.visit_params_mut(&mut |name, p| {
            p.trainable = name.contains("router") || name.contains("adapter");
        });
    }
    Ok(model)
}

impl<E: Scalar> UpcycledModel<E> {
    pub fn n_members(&self) -> usize {
        self.layers[0].moe.ffns.len()
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&str, &PTensor<E>)) {
        f("embed", &self.embed);
        for (i, l) in self.layers.iter().enumerate() {
            let p = format!("layers.{i}");
            f(&format!("{p}.attn_norm"), &l.attn_norm);
            match &l.attn {
                UpAttn::Dense(a) => {
                    f(&format!("{p}.attn.wq"), &a.wq);
                    f(&format!("{p}.attn.wk"), &a.wk);
                    f(&format!("{p}.attn.wv"), &a.wv);
                    f(&format!("{p}.attn.wo"), &a.wo);
                }
                UpAttn::Moa(moa) => {
                    f(&format!("{p}.moa.router"), &moa.router);
                    f(&format!("{p}.moa.router_bias"), &moa.router_bias);
                    for (e, a) in moa.attns.iter().enumerate() {
                        f(&format!("{p}.moa.experts.{e}.wq"), &a.wq);
                        f(&format!("{p}.moa.experts.{e}.wk"), &a.wk);
                        f(&format!("{p}.moa.experts.{e}.wv"), &a.wv);
                        f(&format!("{p}.moa.experts.{e}.wo"), &a.wo);
                    }
                    if let Some(ads) = &moa.adapters {
                        for (e, a) in ads.iter().enumerate() {
                            f(&format!("{p}.moa.adapters.{e}"), a);
                        }
                    }
                }
            }
            f(&format!("{p}.ffn_norm"), &l.ffn_norm);
            f(&format!("{p}.moe.router"), &l.moe.router);
            f(&format!("{p}.moe.router_bias"), &l.moe.router_bias);
            for (e, x) in l.moe.ffns.iter().enumerate() {
                f(&format!("{p}.moe.experts.{e}.w_gate"), &x.w_gate);
                f(&format!("{p}.moe.experts.{e}.w_up"), &x.w_up);
                f(&format!("{p}.moe.experts.{e}.w_down"), &x.w_down);
            }
            if let Some(ads) = &l.moe.adapters {
                for (e, a) in ads.iter().enumerate() {
                    f(&format!("{p}.moe.adapters.{e}"), a);
                }
            }
        }
        f("final_norm", &self.final_norm);
        f("head", &self.head);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut PTensor<E>)) {
        f("embed", &mut self.embed);
        for (i, l) in self.layers.iter_mut().enumerate() {
            let p = format!("layers.{i}");
            f(&format!("{p}.attn_norm"), &mut l.attn_norm);
            match &mut l.attn {
                UpAttn::Dense(a) => {
                    f(&format!("{p}.attn.wq"), &mut a.wq);
                    f(&format!("{p}.attn.wk"), &mut a.wk);
                    f(&format!("{p}.attn.wv"), &mut a.wv);
                    f(&format!("{p}.attn.wo"), &mut a.wo);
                }
                UpAttn::Moa(moa) => {
                    f(&format!("{p}.moa.router"), &mut moa.router);
                    f(&format!("{p}.moa.router_bias"), &mut moa.router_bias);
                    for (e, a) in moa.attns.iter_mut().enumerate() {
                        f(&format!("{p}.moa.experts.{e}.wq"), &mut a.wq);
                        f(&format!("{p}.moa.experts.{e}.wk"), &mut a.wk);
                        f(&format!("{p}.moa.experts.{e}.wv"), &mut a.wv);
                        f(&format!("{p}.moa.experts.{e}.wo"), &mut a.wo);
                    }
                    if let Some(ads) = &mut moa.adapters {
                        for (e, a) in ads.iter_mut().enumerate() {
                            f(&format!("{p}.moa.adapters.{e}"), a);
                        }
                    }
                }
            }
            f(&format!("{p}.ffn_norm"), &mut l.ffn_norm);
            f(&format!("{p}.moe.router"), &mut l.moe.router);
            f(&format!("{p}.moe.router_bias"), &mut l.moe.router_bias);
            for (e, x) in l.moe.ffns.iter_mut().enumerate() {
                f(&format!("{p}.moe.experts.{e}.w_gate"), &mut x.w_gate);
                f(&format!("{p}.moe.experts.{e}.w_up"), &mut x.w_up);
                f(&format!("{p}.moe.experts.{e}.w_down"), &mut x.w_down);
            }
            if let Some(ads) = &mut l.moe.adapters {
                for (e, a) in ads.iter_mut().enumerate() {
                    f(&format!("{p}.moe.adapters.{e}"), a);
                }
            }
        }
        f("final_norm", &mut self.final_norm);
        f("head", &mut self.head);
    }

    /// sha256 per member-copied expert tensor (FFN and attention experts),
    /// the tensors the adapters variant must leave untouched.
    pub fn expert_tensor_hashes(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        self.visit_params(&mut |name, p| {
            if name.contains(".experts.") {
                out.push((name.to_string(), stitchkit_core::ckpt::bytes_hash(&p.to_bytes())));
            }
        });
        out
    }

    /// Router weights over members for an input [b, t, d] -> [b, t, M].
    fn routing(
        &self,
        tape: &mut Tape<E>,
        hn: NodeId,
        router: &PTensor<E>,
        bias: &PTensor<E>,
        b: usize,
        t: usize,
    ) -> Result<NodeId> {
        let m = self.n_members();
        let r = tape.leaf(router);
        let rb = tape.leaf(bias);
        let z = tape.matmul(hn, r)?;
        let mut z = tape.add_bias(z, rb)?;
        if let Some(k) = self.top_k {
            if k < m {
                // Restrict the softmax to each token's top-k logits: adding
                // -inf outside the selected set renormalizes over it.
                let zv = tape.value(z).to_vec();
                let rows = b * t;
                let mut mask = vec![E::from_f64(-1e30); rows * m];
                for row in 0..rows {
                    let mut idx: Vec<usize> = (0..m).collect();
                    idx.sort_by(|&a, &c| {
                        zv[row * m + c]
                            .partial_cmp(&zv[row * m + a])
                            .unwrap_or(std::cmp::Ordering::Equal)
                            .then(a.cmp(&c))
                    });
                    for &i in idx.iter().take(k) {
                        mask[row * m + i] = E::ZERO;
                    }
                }
                let mask = tape.constant(vec![b, t, m], mask);
                z = tape.add(z, mask)?;
            }
        }
        Ok(tape.softmax(z, 2)?)
    }

    /// Weighted sum of per-member branch outputs: sum_i p_i * out_i.
    fn mix(
        &self,
        tape: &mut Tape<E>,
        p: NodeId,
        outs: &[NodeId],
        b: usize,
        t: usize,
    ) -> Result<NodeId> {
        let mut acc: Option<NodeId> = None;
        for (i, &o) in outs.iter().enumerate() {
            let col = tape.slice(p, 2, i, 1)?;
            let col = tape.reshape(col, &[b, t])?;
            let term = tape.row_scale(o, col)?;
            acc = Some(match acc {
                None => term,
                Some(a) => tape.add(a, term)?,
            });
        }
        Ok(acc.expect("at least one member"))
    }

    pub fn forward_hidden(
        &self,
        tape: &mut Tape<E>,
        tokens: &[u32],
        b: usize,
        t: usize,
    ) -> Result<NodeId> {
        let cfg = &self.config;
        let table = tape.leaf(&self.embed);
        let mut x = tape.embedding(table, tokens, &[b, t])?;
        for l in &self.layers {
            // Attention sublayer.
            let norm = tape.leaf(&l.attn_norm);
            let hn = tape.rmsnorm(x, norm, RMS_EPS)?;
            let att = match &l.attn {
                UpAttn::Dense(a) => attn_forward(tape, hn, &a.wq, &a.wk, &a.wv, &a.wo, cfg, b, t)?,
                UpAttn::Moa(moa) => {
                    let p = self.routing(tape, hn, &moa.router, &moa.router_bias, b, t)?;
                    let mut outs = Vec::with_capacity(moa.attns.len());
                    for (i, a) in moa.attns.iter().enumerate() {
                        let mut o =
                            attn_forward(tape, hn, &a.wq, &a.wk, &a.wv, &a.wo, cfg, b, t)?;
                        if let Some(ads) = &moa.adapters {
                            let w = tape.leaf(&ads[i]);
                            o = tape.matmul(o, w)?;
                        }
                        outs.push(o);
                    }
                    self.mix(tape, p, &outs, b, t)?
                }
            };
            x = tape.add(x, att)?;

            // MoE FFN sublayer.
            let norm = tape.leaf(&l.ffn_norm);
            let hn = tape.rmsnorm(x, norm, RMS_EPS)?;
            let p = self.routing(tape, hn, &l.moe.router, &l.moe.router_bias, b, t)?;
            let mut outs = Vec::with_capacity(l.moe.ffns.len());
            for (i, fx) in l.moe.ffns.iter().enumerate() {
                let mut o = ffn_forward(tape, hn, &fx.w_gate, &fx.w_up, &fx.w_down)?;
                if let Some(ads) = &l.moe.adapters {
                    let w = tape.leaf(&ads[i]);
                    o = tape.matmul(o, w)?;
                }
                outs.push(o);
            }
            let moe_out = self.mix(tape, p, &outs, b, t)?;
            x = tape.add(x, moe_out)?;
        }
        Ok(x)
    }

    pub fn logits(
        &self,
        tape: &mut Tape<E>,
        tokens: &[u32],
        b: usize,
        t: usize,
    ) -> Result<NodeId> {
        let h = self.forward_hidden(tape, tokens, b, t)?;
        let norm = tape.leaf(&self.final_norm);
        let h = tape.rmsnorm(h, norm, RMS_EPS)?;
        let head = tape.leaf(&self.head);
        Ok(tape.matmul(h, head)?)
    }

    pub fn loss(&self, tape: &mut Tape<E>, tokens: &[u32], b: usize, t: usize) -> Result<NodeId> {
        if t < 2 {
            return Err(ModelError::SequenceTooShort { len: t });
        }
        let mut inputs = Vec::with_capacity(b * (t - 1));
        let mut targets = Vec::with_capacity(b * (t - 1));
        for row in 0..b {
            inputs.extend_from_slice(&tokens[row * t..row * t + t - 1]);
            targets.extend_from_slice(&tokens[row * t + 1..row * t + t]);
        }
        let logits = self.logits(tape, &inputs, b, t - 1)?;
        let flat = tape.reshape(logits, &[b * (t - 1), self.config.vocab_size])?;
        Ok(tape.cross_entropy(flat, &targets, None)?)
    }

    pub fn generate(
        &self,
        prompt: &[u32],
        n_new: usize,
        decode: Decode,
        stop: Option<u32>,
        rng: &mut Rng,
    ) -> Result<Vec<u32>> {
        assert!(!prompt.is_empty());
        if prompt.len() + n_new > self.config.max_seq_len {
            return Err(ModelError::ContextOverflow {
                len: prompt.len() + n_new,
                max: self.config.max_seq_len,
            });
        }
        let mut tokens = prompt.to_vec();
        for _ in 0..n_new {
            let mut tape = Tape::<E>::new(false);
            let t = tokens.len();
            let logits = self.logits(&mut tape, &tokens, 1, t)?;
            let v = self.config.vocab_size;
            let last = &tape.value(logits)[(t - 1) * v..t * v];
            let next = crate::transformer::sample_from_logits(last, decode, rng);
            tokens.push(next);
            if Some(next) == stop {
                break;
            }
        }
        Ok(tokens)
    }
}
