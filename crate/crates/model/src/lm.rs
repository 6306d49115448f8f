//! A uniform evaluation surface over every model kind this crate builds:
//! dense transformers, stitched models, upcycled MoEs, BTM output
//! ensembles, and sequence-routed ensembles.

use stitchkit_core::rng::Rng;
use stitchkit_core::tape::Tape;
use stitchkit_core::Scalar;

use crate::error::ModelError;
use crate::merge::{log_softmax_at, softmax_f64, BtmEnsemble, SequenceRouter};
use crate::moe::UpcycledModel;
use crate::stitch::StitchedModel;
use crate::transformer::{Decode, TransformerModel};
use crate::{ModelConfig, Result};

/// One member picked per prompt; all generation goes to it.
pub struct RoutedEnsemble<E: Scalar> {
    pub members: Vec<TransformerModel<E>>,
    pub router: SequenceRouter<E>,
}

pub enum AnyModel<E: Scalar> {
    Dense(TransformerModel<E>),
    Stitched(StitchedModel<E>),
    Upcycled(UpcycledModel<E>),
    Btm(BtmEnsemble<E>),
    Routed(RoutedEnsemble<E>),
}

/// Aggregate next-token statistics over predicted positions.
#[derive(Debug, Default, Clone, Copy)]
pub struct TokenStats {
    pub nll_sum: f64,
    pub correct: usize,
    pub predicted: usize,
}

impl TokenStats {
    pub fn mean_nll(&self) -> f64 {
        self.nll_sum / self.predicted.max(1) as f64
    }
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.predicted.max(1) as f64
    }
    pub fn merge(&mut self, other: TokenStats) {
        self.nll_sum += other.nll_sum;
        self.correct += other.correct;
        self.predicted += other.predicted;
    }
}

impl<E: Scalar> AnyModel<E> {
    pub fn config(&self) -> &ModelConfig {
        match self {
            AnyModel::Dense(m) => &m.config,
            AnyModel::Stitched(m) => &m.hub.config,
            AnyModel::Upcycled(m) => &m.config,
            AnyModel::Btm(m) => m.config(),
            AnyModel::Routed(m) => &m.members[0].config,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            AnyModel::Dense(_) => "dense",
            AnyModel::Stitched(_) => "stitched",
            AnyModel::Upcycled(_) => "moe",
            AnyModel::Btm(_) => "btm",
            AnyModel::Routed(_) => "router",
        }
    }

    /// Next-token stats over a [b, t] batch of packed sequences.
    pub fn batch_stats(&self, tokens: &[u32], b: usize, t: usize) -> Result<TokenStats> {
        if t < 2 {
            return Err(ModelError::SequenceTooShort { len: t });
        }
        match self {
            AnyModel::Dense(m) => {
                let mut rng = Rng::seeded(0);
                let mut tape = Tape::<E>::new(false);
                let mut inputs = Vec::with_capacity(b * (t - 1));
                for row in 0..b {
                    inputs.extend_from_slice(&tokens[row * t..row * t + t - 1]);
                }
                let logits = m.logits(&mut tape, &inputs, b, t - 1, false, &mut rng)?;
                Ok(stats_from_logits(
                    tape.value(logits),
                    tokens,
                    b,
                    t,
                    m.config.vocab_size,
                ))
            }
            AnyModel::Stitched(m) => {
                let mut rng = Rng::seeded(0);
                let mut tape = Tape::<E>::new(false);
                let mut inputs = Vec::with_capacity(b * (t - 1));
                for row in 0..b {
                    inputs.extend_from_slice(&tokens[row * t..row * t + t - 1]);
                }
                let (logits, _) = m.forward(&mut tape, &inputs, b, t - 1, false, &mut rng, false)?;
                Ok(stats_from_logits(
                    tape.value(logits),
                    tokens,
                    b,
                    t,
                    m.hub.config.vocab_size,
                ))
            }
            AnyModel::Upcycled(m) => {
                let mut tape = Tape::<E>::new(false);
                let mut inputs = Vec::with_capacity(b * (t - 1));
                for row in 0..b {
                    inputs.extend_from_slice(&tokens[row * t..row * t + t - 1]);
                }
                let logits = m.logits(&mut tape, &inputs, b, t - 1)?;
                Ok(stats_from_logits(
                    tape.value(logits),
                    tokens,
                    b,
                    t,
                    m.config.vocab_size,
                ))
            }
            AnyModel::Btm(m) => {
                let mut agg = TokenStats::default();
                for row in 0..b {
                    let seq = &tokens[row * t..(row + 1) * t];
                    let (nll, correct, predicted) = m.sequence_stats(seq)?;
                    agg.merge(TokenStats {
                        nll_sum: nll,
                        correct,
                        predicted,
                    });
                }
                Ok(agg)
            }
            AnyModel::Routed(m) => {
                let mut agg = TokenStats::default();
                for row in 0..b {
                    let seq = &tokens[row * t..(row + 1) * t];
                    let idx = m.router.route(&m.members[0].embed, seq);
                    agg.merge(dense_batch_stats(&m.members[idx], seq, 1, t)?);
                }
                Ok(agg)
            }
        }
    }

    /// Batched greedy continuation over many prompts. Prompts are grouped
    /// by equal length and decoded together; rows that emit `stop` keep
    /// padding along until the group finishes and are trimmed afterwards.
    /// Falls back to one-by-one decoding for ensemble kinds.
    pub fn generate_greedy_batch(
        &self,
        prompts: &[Vec<u32>],
        budget: usize,
        stop: Option<u32>,
    ) -> Result<Vec<Vec<u32>>> {
        if let AnyModel::Routed(m) = self {
            // Route each prompt, then decode each member's share as a
            // dense batch.
            let mut out: Vec<Vec<u32>> = vec![Vec::new(); prompts.len()];
            let mut by_member: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
            for (i, p) in prompts.iter().enumerate() {
                by_member
                    .entry(m.router.route(&m.members[0].embed, p))
                    .or_default()
                    .push(i);
            }
            for (mi, idxs) in by_member {
                let sub: Vec<Vec<u32>> = idxs.iter().map(|&i| prompts[i].clone()).collect();
                let dense = AnyModel::Dense(m.members[mi].clone());
                let gen = dense.generate_greedy_batch(&sub, budget, stop)?;
                for (&i, g) in idxs.iter().zip(gen) {
                    out[i] = g;
                }
            }
            return Ok(out);
        }
        if let AnyModel::Btm(m) = self {
            return btm_generate_batch(m, prompts, budget, stop);
        }
        let max_len = self.config().max_seq_len;
        let mut out: Vec<Vec<u32>> = vec![Vec::new(); prompts.len()];
        // Group indices by prompt length.
        let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for (i, p) in prompts.iter().enumerate() {
            assert!(!p.is_empty(), "prompt must be non-empty");
            groups.entry(p.len()).or_default().push(i);
        }
        const CHUNK: usize = 32;
        for (plen, idxs) in groups {
            if plen + budget > max_len {
                return Err(ModelError::ContextOverflow {
                    len: plen + budget,
                    max: max_len,
                });
            }
            for chunk in idxs.chunks(CHUNK) {
                let b = chunk.len();
                let mut tokens: Vec<u32> = Vec::with_capacity(b * (plen + budget));
                for &i in chunk {
                    tokens.extend_from_slice(&prompts[i]);
                }
                let mut t = plen;
                let mut done = vec![false; b];
                for _ in 0..budget {
                    let v = self.config().vocab_size;
                    let logits = self.eval_logits(&tokens, b, t)?;
                    let mut grown: Vec<u32> = Vec::with_capacity(b * (t + 1));
                    for (row, done_flag) in done.iter_mut().enumerate() {
                        let slice = &logits[(row * t + t - 1) * v..(row * t + t) * v];
                        let mut best = 0usize;
                        for (j, x) in slice.iter().enumerate() {
                            if *x > slice[best] {
                                best = j;
                            }
                        }
                        grown.extend_from_slice(&tokens[row * t..(row + 1) * t]);
                        grown.push(best as u32);
                        if Some(best as u32) == stop {
                            *done_flag = true;
                        }
                    }
                    tokens = grown;
                    t += 1;
                    if done.iter().all(|&d| d) {
                        break;
                    }
                }
                for (row, &i) in chunk.iter().enumerate() {
                    let mut seq = tokens[row * t..(row + 1) * t].to_vec();
                    if let Some(stop_tok) = stop {
                        if let Some(pos) = seq[plen..].iter().position(|&x| x == stop_tok) {
                            seq.truncate(plen + pos + 1);
                        }
                    }
                    out[i] = seq;
                }
            }
        }
        Ok(out)
    }

    /// Raw eval-mode logits over a [b, t] batch, flattened [b*t*V].
    fn eval_logits(&self, tokens: &[u32], b: usize, t: usize) -> Result<Vec<E>> {
        let mut rng = Rng::seeded(0);
        match self {
            AnyModel::Dense(m) => {
                let mut tape = Tape::<E>::new(false);
                let id = m.logits(&mut tape, tokens, b, t, false, &mut rng)?;
                Ok(tape.value(id).to_vec())
            }
            AnyModel::Stitched(m) => {
                let mut tape = Tape::<E>::new(false);
                let (id, _) = m.forward(&mut tape, tokens, b, t, false, &mut rng, false)?;
                Ok(tape.value(id).to_vec())
            }
            AnyModel::Upcycled(m) => {
                let mut tape = Tape::<E>::new(false);
                let id = m.logits(&mut tape, tokens, b, t)?;
                Ok(tape.value(id).to_vec())
            }
            _ => unreachable!("eval_logits is only used by batchable kinds"),
        }
    }

    /// Greedy continuation; stops at `stop` if produced.
    pub fn generate_greedy(
        &self,
        prompt: &[u32],
        n_new: usize,
        stop: Option<u32>,
    ) -> Result<Vec<u32>> {
        let mut rng = Rng::seeded(0);
        match self {
            AnyModel::Dense(m) => m.generate(prompt, n_new, Decode::Greedy, stop, &mut rng),
            AnyModel::Upcycled(m) => m.generate(prompt, n_new, Decode::Greedy, stop, &mut rng),
            AnyModel::Stitched(m) => m.generate(prompt, n_new, Decode::Greedy, stop, &mut rng),
            AnyModel::Btm(m) => {
                let max = m.config().max_seq_len;
                if prompt.len() + n_new > max {
                    return Err(ModelError::ContextOverflow {
                        len: prompt.len() + n_new,
                        max,
                    });
                }
                let mut tokens = prompt.to_vec();
                for _ in 0..n_new {
                    let dist = m.next_dist(&tokens)?;
                    let next = argmax_f64(&dist) as u32;
                    tokens.push(next);
                    if Some(next) == stop {
                        break;
                    }
                }
                Ok(tokens)
            }
            AnyModel::Routed(m) => {
                let idx = m.router.route(&m.members[0].embed, prompt);
                m.members[idx].generate(prompt, n_new, Decode::Greedy, stop, &mut rng)
            }
        }
    }
}

/// Batched greedy decoding for the BTM ensemble: at every step each
/// member scores the whole batch once; per-row weights come from the
/// member's cumulative log-likelihood of that row's realized tokens.
fn btm_generate_batch<E: Scalar>(
    m: &BtmEnsemble<E>,
    prompts: &[Vec<u32>],
    budget: usize,
    stop: Option<u32>,
) -> Result<Vec<Vec<u32>>> {
    let v = m.config().vocab_size;
    let max_len = m.config().max_seq_len;
    let mut out: Vec<Vec<u32>> = vec![Vec::new(); prompts.len()];
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, p) in prompts.iter().enumerate() {
        assert!(!p.is_empty());
        groups.entry(p.len()).or_default().push(i);
    }
    const CHUNK: usize = 32;
    for (plen, idxs) in groups {
        if plen + budget > max_len {
            return Err(ModelError::ContextOverflow {
                len: plen + budget,
                max: max_len,
            });
        }
        for chunk in idxs.chunks(CHUNK) {
            let b = chunk.len();
            let mut tokens: Vec<u32> = Vec::with_capacity(b * (plen + budget));
            for &i in chunk {
                tokens.extend_from_slice(&prompts[i]);
            }
            let mut t = plen;
            let mut done = vec![false; b];
            for _ in 0..budget {
                // Per member: one batched forward gives both the context
                // log-likelihoods and the next-token distributions.
                let mut rng = Rng::seeded(0);
                let mut cum = vec![vec![0.0f64; b]; m.members.len()];
                let mut last = vec![vec![0.0f64; b * v]; m.members.len()];
                for (mi, member) in m.members.iter().enumerate() {
                    let mut tape = Tape::<E>::new(false);
                    let id = member.logits(&mut tape, &tokens, b, t, false, &mut rng)?;
                    let lv = tape.value(id);
                    for row in 0..b {
                        for pos in 0..t - 1 {
                            let slice = &lv[(row * t + pos) * v..(row * t + pos + 1) * v];
                            cum[mi][row] +=
                                log_softmax_at(slice, tokens[row * t + pos + 1] as usize);
                        }
                        let slice = &lv[(row * t + t - 1) * v..(row * t + t) * v];
                        let probs = softmax_f64(slice);
                        last[mi][row * v..(row + 1) * v].copy_from_slice(&probs);
                    }
                }
                let mut grown: Vec<u32> = Vec::with_capacity(b * (t + 1));
                for (row, done_flag) in done.iter_mut().enumerate() {
                    let logliks: Vec<f64> = (0..m.members.len()).map(|mi| cum[mi][row]).collect();
                    let w = BtmEnsemble::<E>::weights_from_logliks(&logliks);
                    let mut mix = vec![0.0f64; v];
                    for (mi, wm) in w.iter().enumerate() {
                        for j in 0..v {
                            mix[j] += wm * last[mi][row * v + j];
                        }
                    }
                    let next = argmax_f64(&mix) as u32;
                    grown.extend_from_slice(&tokens[row * t..(row + 1) * t]);
                    grown.push(next);
                    if Some(next) == stop {
                        *done_flag = true;
                    }
                }
                tokens = grown;
                t += 1;
                if done.iter().all(|&d| d) {
                    break;
                }
            }
            for (row, &i) in chunk.iter().enumerate() {
                let mut seq = tokens[row * t..(row + 1) * t].to_vec();
                if let Some(stop_tok) = stop {
                    if let Some(pos) = seq[plen..].iter().position(|&x| x == stop_tok) {
                        seq.truncate(plen + pos + 1);
                    }
                }
                out[i] = seq;
            }
        }
    }
    Ok(out)
}

fn dense_batch_stats<E: Scalar>(
    m: &TransformerModel<E>,
    tokens: &[u32],
    b: usize,
    t: usize,
) -> Result<TokenStats> {
    let mut rng = Rng::seeded(0);
    let mut tape = Tape::<E>::new(false);
    let mut inputs = Vec::with_capacity(b * (t - 1));
    for row in 0..b {
        inputs.extend_from_slice(&tokens[row * t..row * t + t - 1]);
    }
    let logits = m.logits(&mut tape, &inputs, b, t - 1, false, &mut rng)?;
    Ok(stats_from_logits(
        tape.value(logits),
        tokens,
        b,
        t,
        m.config.vocab_size,
    ))
}

fn stats_from_logits<E: Scalar>(
    logits: &[E],
    tokens: &[u32],
    b: usize,
    t: usize,
    v: usize,
) -> TokenStats {
    let mut stats = TokenStats::default();
    for row in 0..b {
        for pos in 0..t - 1 {
            let slice = &logits[(row * (t - 1) + pos) * v..(row * (t - 1) + pos + 1) * v];
            let target = tokens[row * t + pos + 1] as usize;
            stats.nll_sum -= log_softmax_at(slice, target);
            let mut best = 0usize;
            for (i, x) in slice.iter().enumerate() {
                if *x > slice[best] {
                    best = i;
                }
            }
            if best == target {
                stats.correct += 1;
            }
            stats.predicted += 1;
        }
    }
    stats
}

pub(crate) fn argmax_f64(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// BTM's output distribution must stay a distribution.
pub fn assert_distribution(dist: &[f64], tol: f64) -> bool {
    dist.iter().all(|&p| p >= 0.0) && (dist.iter().sum::<f64>() - 1.0).abs() < tol
}

// Needed by AnyModel::generate_greedy's Stitched arm.
impl<E: Scalar> StitchedModel<E> {
    pub fn generate(
        &self,
        prompt: &[u32],
        n_new: usize,
        decode: Decode,
        stop: Option<u32>,
        rng: &mut Rng,
    ) -> Result<Vec<u32>> {
        assert!(!prompt.is_empty());
        let max = self.hub.config.max_seq_len;
        if prompt.len() + n_new > max {
            return Err(ModelError::ContextOverflow {
                len: prompt.len() + n_new,
                max,
            });
        }
        let mut tokens = prompt.to_vec();
        for _ in 0..n_new {
            let mut tape = Tape::<E>::new(false);
            let t = tokens.len();
            let mut r = Rng::seeded(0);
            let (logits, _) = self.forward(&mut tape, &tokens, 1, t, false, &mut r, false)?;
            let v = self.hub.config.vocab_size;
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

/// Softmax of a logit row, in f64; used by eval tooling.
pub fn next_probs<E: Scalar>(logits_row: &[E]) -> Vec<f64> {
    softmax_f64(logits_row)
}
