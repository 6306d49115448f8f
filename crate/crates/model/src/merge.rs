//! Training-free and lightweight expert-merging baselines: uniform weight
//! soup, Bayes-weighted output ensembling, and sequence-level routing.

use stitchkit_core::ckpt::Ckpt;
use stitchkit_core::rng::Rng;
use stitchkit_core::tape::Tape;
use stitchkit_core::tensor::PTensor;
use stitchkit_core::Scalar;

use crate::error::ModelError;
use crate::transformer::TransformerModel;
use crate::Result;

/// Uniformly average the tensors of compatible checkpoints. Inputs are
/// summed in sorted-hash order so the result is independent of argument
/// order, bit for bit.
pub fn model_soup<E: Scalar>(
    ckpts: &[&Ckpt],
) -> Result<(Vec<(String, PTensor<E>)>, serde_json::Value)> {
    if ckpts.is_empty() {
        return Err(ModelError::IncompatibleCheckpoints("no checkpoints".into()));
    }
    let mut ordered: Vec<&Ckpt> = ckpts.to_vec();
    ordered.sort_by(|a, b| a.hash().cmp(b.hash()));

    let first = ordered[0];
    let names: Vec<String> = first.tensor_names().map(str::to_string).collect();
    for c in &ordered[1..] {
        let other: Vec<String> = c.tensor_names().map(str::to_string).collect();
        if other != names {
            return Err(ModelError::IncompatibleCheckpoints(format!(
                "tensor name sets differ between {} and {}",
                first.hash(),
                c.hash()
            )));
        }
        if c.manifest.config != first.manifest.config {
            return Err(ModelError::IncompatibleCheckpoints(format!(
                "configs differ between {} and {}",
                first.hash(),
                c.hash()
            )));
        }
    }
    let inv = E::from_f64(1.0 / ordered.len() as f64);
    let mut out = Vec::with_capacity(names.len());
    for name in &names {
        let mut acc: Option<PTensor<E>> = None;
        for c in &ordered {
            let t = c.load_tensor::<E>(name)?;
            match &mut acc {
                None => acc = Some(t),
                Some(a) => {
                    if a.shape != t.shape {
                        return Err(ModelError::IncompatibleCheckpoints(format!(
                            "tensor `{name}` shape differs: {:?} vs {:?}",
                            a.shape, t.shape
                        )));
                    }
                    for (x, &y) in a.values_mut().iter_mut().zip(t.data.iter()) {
                        *x += y;
                    }
                }
            }
        }
        let mut a = acc.expect("non-empty");
        for v in a.values_mut() {
            *v = *v * inv;
        }
        out.push((name.clone(), a));
    }
    Ok((out, first.manifest.config.clone()))
}

/// Output-logit ensemble with Bayes-rule context weighting under a uniform
/// prior: member weights are proportional to each member's likelihood of
/// the context so far and are recomputed as the context grows.
pub struct BtmEnsemble<E: Scalar> {
    pub members: Vec<TransformerModel<E>>,
}

impl<E: Scalar> BtmEnsemble<E> {
    pub fn new(members: Vec<TransformerModel<E>>) -> Result<Self> {
        if members.is_empty() {
            return Err(ModelError::IncompatibleConfigs("empty ensemble".into()));
        }
        let v = members[0].config.vocab_size;
        if members.iter().any(|m| m.config.vocab_size != v) {
            return Err(ModelError::IncompatibleConfigs(
                "ensemble members must share a vocabulary".into(),
            ));
        }
        Ok(Self { members })
    }

    pub fn config(&self) -> &crate::ModelConfig {
        &self.members[0].config
    }

    /// Per-member log-probability of each realized token given its prefix:
    /// rows[i][t-1] = log p_i(tokens[t] | tokens[..t]).
    pub fn member_token_logprobs(&self, tokens: &[u32]) -> Result<Vec<Vec<f64>>> {
        let t = tokens.len();
        let v = self.config().vocab_size;
        let mut rng = Rng::seeded(0);
        let mut rows = Vec::with_capacity(self.members.len());
        for m in &self.members {
            let mut tape = Tape::<E>::new(false);
            let logits = m.logits(&mut tape, &tokens[..t - 1], 1, t - 1, false, &mut rng)?;
            let lv = tape.value(logits);
            let mut row = Vec::with_capacity(t - 1);
            for pos in 0..t - 1 {
                let slice = &lv[pos * v..(pos + 1) * v];
                row.push(log_softmax_at(slice, tokens[pos + 1] as usize));
            }
            rows.push(row);
        }
        Ok(rows)
    }

    /// Ensemble weights given cumulative member log-likelihoods. An empty
    /// context yields uniform weights.
    pub fn weights_from_logliks(logliks: &[f64]) -> Vec<f64> {
        let mx = logliks.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logliks.iter().map(|l| (l - mx).exp()).collect();
        let sum: f64 = exps.iter().sum();
        exps.iter().map(|e| e / sum).collect()
    }

    /// Next-token distribution for a context: weight each member by its
    /// context likelihood, then mix the members' next-token softmaxes.
    pub fn next_dist(&self, context: &[u32]) -> Result<Vec<f64>> {
        assert!(!context.is_empty(), "context must be non-empty");
        let v = self.config().vocab_size;
        let logliks: Vec<f64> = if context.len() < 2 {
            vec![0.0; self.members.len()]
        } else {
            self.member_token_logprobs(&context[..context.len()])
                .map(|rows| rows.iter().map(|r| r.iter().sum()).collect())?
        };
        let weights = Self::weights_from_logliks(&logliks);

        let mut mix = vec![0.0f64; v];
        let mut rng = Rng::seeded(0);
        for (m, w) in self.members.iter().zip(&weights) {
            let mut tape = Tape::<E>::new(false);
            let t = context.len();
            let logits = m.logits(&mut tape, context, 1, t, false, &mut rng)?;
            let last = &tape.value(logits)[(t - 1) * v..t * v];
            let probs = softmax_f64(last);
            for (acc, p) in mix.iter_mut().zip(&probs) {
                *acc += w * p;
            }
        }
        Ok(mix)
    }

    /// Mixture NLL and argmax stats over one sequence, with weights
    /// recomputed at every position from the preceding context.
    pub fn sequence_stats(&self, tokens: &[u32]) -> Result<(f64, usize, usize)> {
        let t = tokens.len();
        if t < 2 {
            return Err(ModelError::SequenceTooShort { len: t });
        }
        let v = self.config().vocab_size;
        // One forward per member; reuse full logits for dists and logprobs.
        let mut member_probs: Vec<Vec<f64>> = Vec::new(); // [m][pos*v..]
        let mut rng = Rng::seeded(0);
        for m in &self.members {
            let mut tape = Tape::<E>::new(false);
            let logits = m.logits(&mut tape, &tokens[..t - 1], 1, t - 1, false, &mut rng)?;
            let lv = tape.value(logits);
            let mut probs = Vec::with_capacity((t - 1) * v);
            for pos in 0..t - 1 {
                probs.extend(softmax_f64(&lv[pos * v..(pos + 1) * v]));
            }
            member_probs.push(probs);
        }
        let mut cum = vec![0.0f64; self.members.len()];
        let mut nll_sum = 0.0;
        let mut correct = 0usize;
        for pos in 0..t - 1 {
            let w = Self::weights_from_logliks(&cum);
            let mut mix = vec![0.0f64; v];
            for (mi, probs) in member_probs.iter().enumerate() {
                for j in 0..v {
                    mix[j] += w[mi] * probs[pos * v + j];
                }
            }
            let target = tokens[pos + 1] as usize;
            nll_sum -= mix[target].max(1e-300).ln();
            let argmax = mix
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap();
            if argmax == target {
                correct += 1;
            }
            for (mi, probs) in member_probs.iter().enumerate() {
                cum[mi] += probs[pos * v + target].max(1e-300).ln();
            }
        }
        Ok((nll_sum, correct, t - 1))
    }
}

/// Sequence-level expert routing: a linear classifier over the mean seed
/// embedding of a prefix picks one member; all tokens of the sequence then
/// go to that member.
#[derive(Debug, Clone)]
pub struct SequenceRouter<E: Scalar> {
    /// [d_model, n_members]
    pub weight: PTensor<E>,
    pub t_min: usize,
    pub t_max: usize,
}

#[derive(Debug, Clone)]
pub struct RouterTrainConfig {
    pub t_min: usize,
    pub t_max: usize,
    pub lr: f64,
    pub steps: usize,
}

impl Default for RouterTrainConfig {
    fn default() -> Self {
        // Desk prefix range, scaled from the reference setup in proportion
        // to the shorter desk sequences.
        Self {
            t_min: 8,
            t_max: 64,
            lr: 5e-4,
            steps: 300,
        }
    }
}

/// Mean embedding of the first `take` tokens under `embed` ([V, d]).
fn mean_embedding<E: Scalar>(embed: &PTensor<E>, tokens: &[u32], take: usize) -> Vec<E> {
    let d = embed.shape[1];
    let take = take.min(tokens.len()).max(1);
    let mut acc = vec![0.0f64; d];
    for &tok in &tokens[..take] {
        let row = &embed.data[tok as usize * d..(tok as usize + 1) * d];
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += v.to_f64();
        }
    }
    acc.iter().map(|&v| E::from_f64(v / take as f64)).collect()
}

/// Per-sequence mean NLL of one member over fixed-length sequences.
pub fn member_sequence_nlls<E: Scalar>(
    member: &TransformerModel<E>,
    sequences: &[Vec<u32>],
) -> Result<Vec<f64>> {
    let v = member.config.vocab_size;
    let mut out = Vec::with_capacity(sequences.len());
    let mut rng = Rng::seeded(0);
    for seq in sequences {
        let t = seq.len();
        if t < 2 {
            return Err(ModelError::SequenceTooShort { len: t });
        }
        let mut tape = Tape::<E>::new(false);
        let logits = member.logits(&mut tape, &seq[..t - 1], 1, t - 1, false, &mut rng)?;
        let lv = tape.value(logits);
        let mut nll = 0.0;
        for pos in 0..t - 1 {
            nll -= log_softmax_at(&lv[pos * v..(pos + 1) * v], seq[pos + 1] as usize);
        }
        out.push(nll / (t - 1) as f64);
    }
    Ok(out)
}

/// Train the router: classification cross-entropy where the target is the
/// member with the smallest next-token loss on the sequence, and the input
/// is the mean seed embedding of a random-length prefix.
pub fn train_sequence_router<E: Scalar>(
    members: &[&TransformerModel<E>],
    sequences: &[Vec<u32>],
    cfg: &RouterTrainConfig,
    rng: &Rng,
) -> Result<SequenceRouter<E>> {
    let m = members.len();
    if m == 0 {
        return Err(ModelError::InsufficientData("no members".into()));
    }
    let d = members[0].config.d_model;
    if m == 1 {
        // Degenerate case: always route to the single member.
        return Ok(SequenceRouter {
            weight: PTensor::zeros(&[d, 1]),
            t_min: cfg.t_min,
            t_max: cfg.t_max,
        });
    }
    if sequences.len() < 2 * m {
        return Err(ModelError::InsufficientData(format!(
            "{} sequences for {m} members",
            sequences.len()
        )));
    }

    // Targets: argmin member NLL per sequence.
    let mut nlls: Vec<Vec<f64>> = Vec::with_capacity(m);
    for member in members {
        nlls.push(member_sequence_nlls(member, sequences)?);
    }
    let labels: Vec<u32> = (0..sequences.len())
        .map(|s| {
            let mut best = 0usize;
            for i in 1..m {
                if nlls[i][s] < nlls[best][s] {
                    best = i;
                }
            }
            best as u32
        })
        .collect();

    // Features: mean seed embedding over a sampled prefix length.
    let embed = &members[0].embed;
    let mut prefix_rng = rng.stream("router/prefix");
    let features: Vec<E> = sequences
        .iter()
        .flat_map(|seq| {
            let t = prefix_rng.range_inclusive(cfg.t_min as i64, cfg.t_max as i64) as usize;
            mean_embedding(embed, seq, t)
        })
        .collect();
    let n = sequences.len();
    let feat = PTensor::from_vec(&[n, d], features).frozen();

    // Full-batch Adam at a constant learning rate.
    let mut weight = PTensor::<E>::zeros(&[d, m]);
    let mut mom = vec![0.0f64; d * m];
    let mut var = vec![0.0f64; d * m];
    let (b1, b2, eps) = (0.9, 0.999, 1e-8);
    for step in 1..=cfg.steps {
        let mut tape = Tape::<E>::new(true);
        let x = tape.leaf(&feat);
        let w = tape.leaf(&weight);
        let logits = tape.matmul(x, w)?;
        let loss = tape.cross_entropy(logits, &labels, None)?;
        let mut grads = tape.backward(loss)?;
        let id = tape.leaf_id(&weight).expect("staged");
        let g = grads.take(id).expect("trainable");
        drop(tape);
        let vals = weight.values_mut();
        for i in 0..vals.len() {
            let gi = g[i].to_f64();
            mom[i] = b1 * mom[i] + (1.0 - b1) * gi;
            var[i] = b2 * var[i] + (1.0 - b2) * gi * gi;
            let mh = mom[i] / (1.0 - b1.powi(step as i32));
            let vh = var[i] / (1.0 - b2.powi(step as i32));
            vals[i] = E::from_f64(vals[i].to_f64() - cfg.lr * mh / (vh.sqrt() + eps));
        }
    }
    Ok(SequenceRouter {
        weight,
        t_min: cfg.t_min,
        t_max: cfg.t_max,
    })
}

impl<E: Scalar> SequenceRouter<E> {
    pub fn n_members(&self) -> usize {
        self.weight.shape[1]
    }

    /// Routing decision from the mean embedding of the whole prompt.
    pub fn route(&self, embed: &PTensor<E>, prompt: &[u32]) -> usize {
        let m = self.n_members();
        if m == 1 {
            return 0;
        }
        let d = self.weight.shape[0];
        let f = mean_embedding(embed, prompt, prompt.len());
        let mut best = 0usize;
        let mut best_z = f64::NEG_INFINITY;
        for j in 0..m {
            let mut z = 0.0;
            for c in 0..d {
                z += f[c].to_f64() * self.weight.data[c * m + j].to_f64();
            }
            if z > best_z {
                best_z = z;
                best = j;
            }
        }
        best
    }
}

pub(crate) fn softmax_f64<E: Scalar>(logits: &[E]) -> Vec<f64> {
    let mx = logits
        .iter()
        .map(|v| v.to_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v.to_f64() - mx).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

pub(crate) fn log_softmax_at<E: Scalar>(logits: &[E], idx: usize) -> f64 {
    let mx = logits
        .iter()
        .map(|v| v.to_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    let lse: f64 = logits
        .iter()
        .map(|v| (v.to_f64() - mx).exp())
        .sum::<f64>()
        .ln()
        + mx;
    logits[idx].to_f64() - lse
}
