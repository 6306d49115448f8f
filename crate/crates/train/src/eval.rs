//! Per-domain evaluation: held-out loss, next-token accuracy, and
//! exact-match answer accuracy via greedy generation against generator
//! ground truth.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use stitchkit_model::lm::{AnyModel, TokenStats};

use crate::corpus::{tokenizer, Domain, DomainCorpus};
use crate::error::TrainError;
use crate::Result;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DomainMetrics {
    pub loss: f64,
    pub token_accuracy: f64,
    pub exact_match: f64,
    pub n_items: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_hash: String,
    pub config_hash: String,
    pub domains: BTreeMap<String, DomainMetrics>,
    /// Unweighted mean exact-match over the evaluated domains.
    pub macro_avg: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Exact-match probes per domain.
    pub max_prompts: usize,
    /// Held-out windows for the loss metric.
    pub loss_windows: usize,
    pub seq_len: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            max_prompts: 128,
            loss_windows: 32,
            seq_len: 128,
        }
    }
}

/// Exact-match over a corpus's eval items: greedy generation, stopping at
/// newline, compared to the generator's stated answer.
pub fn exact_match(
    model: &AnyModel<f32>,
    corpus: &DomainCorpus,
    max_prompts: usize,
) -> Result<(f64, usize)> {
    let items = corpus.eval_items(max_prompts);
    if items.is_empty() {
        return Ok((0.0, 0));
    }
    let prompts: Vec<Vec<u32>> = items.iter().map(|i| tokenizer::encode(&i.prompt)).collect();
    let budget = items
        .iter()
        .map(|i| tokenizer::encode(&i.answer).len())
        .max()
        .unwrap_or(0)
        + 2;
    let generated = model
        .generate_greedy_batch(&prompts, budget, Some(tokenizer::NEWLINE))
        .map_err(TrainError::Model)?;
    let mut hits = 0usize;
    for ((item, prompt), gen) in items.iter().zip(&prompts).zip(&generated) {
        let completion = tokenizer::decode(&gen[prompt.len()..]);
        let completion = completion.trim_end_matches('\n');
        if completion == item.answer {
            hits += 1;
        }
    }
    Ok((hits as f64 / items.len() as f64, items.len()))
}

/// Held-out loss and token accuracy over sequential non-overlapping
/// windows of the corpus eval stream.
pub fn heldout_stats(
    model: &AnyModel<f32>,
    corpus: &DomainCorpus,
    cfg: &EvalConfig,
) -> Result<TokenStats> {
    let stream = corpus.eval_stream();
    let w = cfg.seq_len + 1;
    let n_windows = (stream.len() / w).min(cfg.loss_windows);
    if n_windows == 0 {
        return Err(TrainError::InsufficientData(format!(
            "eval stream of {} tokens has no {w}-token window",
            stream.len()
        )));
    }
    let mut stats = TokenStats::default();
    // Batch windows to amortize forward passes on tape-based kinds.
    let chunk = 8usize;
    let mut start = 0usize;
    let mut remaining = n_windows;
    while remaining > 0 {
        let b = remaining.min(chunk);
        let mut tokens = Vec::with_capacity(b * w);
        for i in 0..b {
            tokens.extend_from_slice(&stream[(start + i) * w..(start + i + 1) * w]);
        }
        stats.merge(model.batch_stats(&tokens, b, w)?);
        start += b;
        remaining -= b;
    }
    Ok(stats)
}

/// Evaluate a model over several domains. Determinism: everything inside
/// runs in eval mode with fixed greedy decoding.
pub fn evaluate(
    model: &AnyModel<f32>,
    corpora: &[&DomainCorpus],
    cfg: &EvalConfig,
    model_hash: &str,
    config_hash: &str,
) -> Result<EvalReport> {
    let mut domains = BTreeMap::new();
    let mut macro_sum = 0.0;
    for corpus in corpora {
        let stats = heldout_stats(model, corpus, cfg)?;
        let (em, n_items) = exact_match(model, corpus, cfg.max_prompts)?;
        macro_sum += em;
        domains.insert(
            corpus.domain.as_str().to_string(),
            DomainMetrics {
                loss: stats.mean_nll(),
                token_accuracy: stats.accuracy(),
                exact_match: em,
                n_items,
            },
        );
    }
    Ok(EvalReport {
        model_hash: model_hash.to_string(),
        config_hash: config_hash.to_string(),
        macro_avg: macro_sum / corpora.len().max(1) as f64,
        domains,
    })
}

impl EvalReport {
    pub fn exact_match_of(&self, domain: Domain) -> f64 {
        self.domains
            .get(domain.as_str())
            .map(|m| m.exact_match)
            .unwrap_or(0.0)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}
