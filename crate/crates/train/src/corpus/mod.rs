//! Synthetic multi-domain corpora. Each domain is a formal language with
//! exact, machine-checkable ground truth, so specialization and
//! cross-capability become measurable with exact match:
//!
//! * arith — chained arithmetic, symbol or worded operators: `3+4=7`,
//!   `3 plus 4=7`
//! * code — straight-line programs with a checkable output:
//!   `a=3;b=a+2;print(b);output:5`
//! * cipher — substitution-cipher translation pairs:
//!   `e:the cat runs>gvk xig nwpl`
//! * cipher_arith — worded arithmetic with all letters enciphered, digits
//!   and answer intact: `3 gwnf 4=7` (the cross-capability domain)
//! * mixed — the seed mixture: base-domain lines plus generic filler
//!   sentences
//!
//! Generation is a pure function of (params, seed); train/eval splits are
//! disjoint at the line level by construction (lines are unique).

pub mod bigram;
pub mod cipher_key;
pub mod evaluator;
pub mod tokenizer;

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use stitchkit_core::rng::Rng;

use crate::error::TrainError;
use crate::Result;
pub use cipher_key::CipherKey;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Arith,
    Code,
    Cipher,
    Mixed,
    CipherArith,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Arith => "arith",
            Domain::Code => "code",
            Domain::Cipher => "cipher",
            Domain::Mixed => "mixed",
            Domain::CipherArith => "cipher_arith",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "arith" => Domain::Arith,
            "code" => Domain::Code,
            "cipher" => Domain::Cipher,
            "mixed" => Domain::Mixed,
            "cipher_arith" => Domain::CipherArith,
            other => return Err(TrainError::BadParams(format!("unknown domain `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenParams {
    /// Operands drawn from 0..=max_operand.
    pub max_operand: i64,
    /// Maximum chained operations per arithmetic line (1..=3).
    pub max_chain_ops: usize,
    /// Fraction of arithmetic lines rendered with worded operators.
    pub worded_fraction: f64,
    /// Statements per code line (before the print).
    pub code_max_stmts: usize,
    /// Substitution key seed shared by cipher and cipher_arith.
    pub cipher_key_seed: u64,
    /// Explicit 26-letter key overriding the seed-derived one.
    pub cipher_key: Option<String>,
    pub n_train: usize,
    pub n_eval: usize,
}

impl Default for GenParams {
    fn default() -> Self {
        Self {
            max_operand: 9,
            max_chain_ops: 2,
            worded_fraction: 0.35,
            code_max_stmts: 3,
            cipher_key_seed: 1234,
            cipher_key: None,
            n_train: 6000,
            n_eval: 600,
        }
    }
}

impl GenParams {
    pub fn key(&self) -> Result<CipherKey> {
        match &self.cipher_key {
            Some(k) => CipherKey::parse(k),
            None => Ok(CipherKey::from_seed(self.cipher_key_seed)),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.max_operand < 1 || !(1..=3).contains(&self.max_chain_ops) {
            return Err(TrainError::BadParams(format!(
                "operand range 0..={} with {} chained ops",
                self.max_operand, self.max_chain_ops
            )));
        }
        if self.code_max_stmts < 1 || self.code_max_stmts > 4 {
            return Err(TrainError::BadParams(format!(
                "code_max_stmts {} outside 1..=4",
                self.code_max_stmts
            )));
        }
        if !(0.0..=1.0).contains(&self.worded_fraction) {
            return Err(TrainError::BadParams("worded_fraction outside [0,1]".into()));
        }
        if self.n_train == 0 || self.n_eval == 0 {
            return Err(TrainError::BadParams("empty split requested".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DomainCorpus {
    pub domain: Domain,
    pub params: GenParams,
    pub seed: u64,
    pub train: Vec<String>,
    pub eval: Vec<String>,
    /// Per-line source tags; equals `domain` everywhere except in mixed,
    /// where lines keep their base domain and filler is tagged Mixed.
    pub train_tags: Vec<Domain>,
    pub eval_tags: Vec<Domain>,
}

/// A prompt with its exact expected answer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalItem {
    pub prompt: String,
    pub answer: String,
    pub tag: Domain,
}

/// Split a line into (prompt, answer) at the domain's answer marker.
pub fn prompt_answer(tag: Domain, line: &str) -> Option<(String, String)> {
    match tag {
        Domain::Arith | Domain::CipherArith => line
            .split_once('=')
            .map(|(p, a)| (format!("{p}="), a.to_string())),
        Domain::Code => line
            .split_once("output:")
            .map(|(p, a)| (format!("{p}output:"), a.to_string())),
        Domain::Cipher => {
            if line.starts_with("e:") || line.starts_with("d:") {
                line.split_once('>')
                    .map(|(p, a)| (format!("{p}>"), a.to_string()))
            } else {
                None
            }
        }
        Domain::Mixed => None, // filler carries no answer
    }
}

impl DomainCorpus {
    /// Token stream of the train split: lines joined with newlines.
    pub fn train_stream(&self) -> Vec<u32> {
        stream_of(&self.train)
    }

    pub fn eval_stream(&self) -> Vec<u32> {
        stream_of(&self.eval)
    }

    /// Promptable items from the eval split, up to `limit`.
    pub fn eval_items(&self, limit: usize) -> Vec<EvalItem> {
        self.eval
            .iter()
            .zip(&self.eval_tags)
            .filter_map(|(line, &tag)| {
                prompt_answer(tag, line).map(|(prompt, answer)| EvalItem {
                    prompt,
                    answer,
                    tag,
                })
            })
            .take(limit)
            .collect()
    }

    /// Plain-text lines plus a JSON sidecar with params, seed, and counts.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("train.txt"), self.train.join("\n"))?;
        fs::write(dir.join("eval.txt"), self.eval.join("\n"))?;
        let sidecar = serde_json::json!({
            "domain": self.domain,
            "params": self.params,
            "seed": self.seed,
            "n_train": self.train.len(),
            "n_eval": self.eval.len(),
            "train_tags": self.train_tags,
            "eval_tags": self.eval_tags,
        });
        fs::write(dir.join("sidecar.json"), serde_json::to_vec_pretty(&sidecar)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let sidecar: serde_json::Value =
            serde_json::from_slice(&fs::read(dir.join("sidecar.json"))?)?;
        let train: Vec<String> = fs::read_to_string(dir.join("train.txt"))?
            .lines()
            .map(str::to_string)
            .collect();
        let eval: Vec<String> = fs::read_to_string(dir.join("eval.txt"))?
            .lines()
            .map(str::to_string)
            .collect();
        Ok(Self {
            domain: serde_json::from_value(sidecar["domain"].clone())?,
            params: serde_json::from_value(sidecar["params"].clone())?,
            seed: sidecar["seed"].as_u64().unwrap_or(0),
            train_tags: serde_json::from_value(sidecar["train_tags"].clone())?,
            eval_tags: serde_json::from_value(sidecar["eval_tags"].clone())?,
            train,
            eval,
        })
    }
}

fn stream_of(lines: &[String]) -> Vec<u32> {
    let mut out = Vec::new();
    for line in lines {
        out.extend(tokenizer::encode(line));
        out.push(tokenizer::NEWLINE);
    }
    out
}

// ---- sentence machinery (cipher plain text and mixed filler) ----

const DETS: &[&str] = &["the", "a"];
const ADJS: &[&str] = &[
    "red", "blue", "big", "old", "new", "cold", "warm", "good", "bad", "fast", "slow", "high",
    "low", "long", "near",
];
const NOUNS: &[&str] = &[
    "cat", "dog", "sun", "moon", "tree", "rock", "fish", "bird", "rain", "snow", "wind", "fire",
    "water", "day", "night", "king", "road", "ship", "star", "leaf", "plus", "minus", "times",
];
const VERBS: &[&str] = &[
    "sees", "eats", "likes", "holds", "finds", "makes", "takes", "gives", "meets", "calls",
];

pub(crate) fn word_lists() -> [&'static [&'static str]; 4] {
    [DETS, ADJS, NOUNS, VERBS]
}

fn gen_sentence(rng: &mut Rng) -> String {
    let mut words = Vec::new();
    let noun_phrase = |rng: &mut Rng, words: &mut Vec<&str>, adj_p: f64| {
        words.push(DETS[rng.below(DETS.len())]);
        if rng.next_f64() < adj_p {
            words.push(ADJS[rng.below(ADJS.len())]);
        }
        words.push(NOUNS[rng.below(NOUNS.len())]);
    };
    noun_phrase(rng, &mut words, 0.45);
    words.push(VERBS[rng.below(VERBS.len())]);
    // Short object phrase half the time keeps translation answers short.
    if rng.next_f64() < 0.55 {
        noun_phrase(rng, &mut words, 0.2);
    }
    words.join(" ")
}

// ---- arithmetic ----

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Op {
    Add,
    Sub,
    Mul,
}

impl Op {
    fn apply(self, a: i64, b: i64) -> i64 {
        match self {
            Op::Add => a + b,
            Op::Sub => a - b,
            Op::Mul => a * b,
        }
    }
    fn symbol(self) -> &'static str {
        match self {
            Op::Add => "+",
            Op::Sub => "-",
            Op::Mul => "*",
        }
    }
    fn word(self) -> &'static str {
        match self {
            Op::Add => "plus",
            Op::Sub => "minus",
            Op::Mul => "times",
        }
    }
}

/// One arithmetic expression: operands, ops, left-to-right value.
fn gen_arith_expr(params: &GenParams, rng: &mut Rng) -> (Vec<i64>, Vec<Op>, i64) {
    let n_ops = 1 + rng.below(params.max_chain_ops);
    let operands: Vec<i64> = (0..=n_ops)
        .map(|_| rng.range_inclusive(0, params.max_operand))
        .collect();
    let ops: Vec<Op> = (0..n_ops)
        .map(|i| {
            // Multiplication only as a single-op line keeps results small.
            if n_ops == 1 && i == 0 && rng.next_f64() < 0.34 {
                Op::Mul
            } else if rng.next_f64() < 0.5 {
                Op::Add
            } else {
                Op::Sub
            }
        })
        .collect();
    let mut value = operands[0];
    for (op, &b) in ops.iter().zip(&operands[1..]) {
        value = op.apply(value, b);
    }
    (operands, ops, value)
}

fn render_arith(operands: &[i64], ops: &[Op], value: i64, worded: bool) -> String {
    let mut s = operands[0].to_string();
    for (op, b) in ops.iter().zip(&operands[1..]) {
        if worded {
            s.push(' ');
            s.push_str(op.word());
            s.push(' ');
        } else {
            s.push_str(op.symbol());
        }
        s.push_str(&b.to_string());
    }
    format!("{s}={value}")
}

/// Generate unique lines until the corpus is full.
fn fill_unique(
    total: usize,
    mut gen: impl FnMut() -> String,
    what: &str,
) -> Result<Vec<String>> {
    let mut seen = BTreeSet::new();
    let mut lines = Vec::with_capacity(total);
    let mut attempts = 0usize;
    let cap = total.saturating_mul(300).max(10_000);
    while lines.len() < total {
        attempts += 1;
        if attempts > cap {
            return Err(TrainError::BadParams(format!(
                "{what}: line space too small for {total} unique lines"
            )));
        }
        let line = gen();
        if seen.insert(line.clone()) {
            lines.push(line);
        }
    }
    Ok(lines)
}

fn split_corpus(
    domain: Domain,
    params: &GenParams,
    seed: u64,
    lines: Vec<String>,
    tags: Option<Vec<Domain>>,
) -> DomainCorpus {
    let n_train = params.n_train;
    let tags = tags.unwrap_or_else(|| vec![domain; lines.len()]);
    let (train, eval) = (
        lines[..n_train].to_vec(),
        lines[n_train..].to_vec(),
    );
    let (train_tags, eval_tags) = (tags[..n_train].to_vec(), tags[n_train..].to_vec());
    DomainCorpus {
        domain,
        params: params.clone(),
        seed,
        train,
        eval,
        train_tags,
        eval_tags,
    }
}

pub fn gen_arith(params: &GenParams, seed: u64) -> Result<DomainCorpus> {
    params.validate()?;
    let mut rng = Rng::seeded(seed).stream("gen/arith");
    let total = params.n_train + params.n_eval;
    let worded = params.worded_fraction;
    let lines = fill_unique(
        total,
        || {
            let (operands, ops, value) = gen_arith_expr(params, &mut rng);
            render_arith(&operands, &ops, value, rng.next_f64() < worded)
        },
        "arith",
    )?;
    Ok(split_corpus(Domain::Arith, params, seed, lines, None))
}

pub fn gen_code(params: &GenParams, seed: u64) -> Result<DomainCorpus> {
    params.validate()?;
    let mut rng = Rng::seeded(seed).stream("gen/code");
    let total = params.n_train + params.n_eval;
    const VARS: &[char] = &['a', 'b', 'c', 'd', 'e'];
    let lines = fill_unique(
        total,
        || {
            let n_stmts = 1 + rng.below(params.code_max_stmts);
            let mut env: Vec<(char, i64)> = Vec::new();
            let mut stmts = Vec::new();
            for s in 0..n_stmts {
                let var = VARS[s];
                let (expr, value) = if env.is_empty() || rng.next_f64() < 0.3 {
                    let v = rng.range_inclusive(0, params.max_operand);
                    (v.to_string(), v)
                } else {
                    let (src, sv) = env[rng.below(env.len())];
                    let op = if rng.next_f64() < 0.5 { Op::Add } else { Op::Sub };
                    let c = rng.range_inclusive(0, params.max_operand);
                    (
                        format!("{src}{}{c}", op.symbol()),
                        op.apply(sv, c),
                    )
                };
                stmts.push(format!("{var}={expr}"));
                env.push((var, value));
            }
            let (out_var, out_val) = env[rng.below(env.len())];
            stmts.push(format!("print({out_var})"));
            format!("{};output:{out_val}", stmts.join(";"))
        },
        "code",
    )?;
    Ok(split_corpus(Domain::Code, params, seed, lines, None))
}

pub fn gen_cipher(params: &GenParams, seed: u64) -> Result<DomainCorpus> {
    params.validate()?;
    let key = params.key()?;
    let mut rng = Rng::seeded(seed).stream("gen/cipher");
    let total = params.n_train + params.n_eval;
    let lines = fill_unique(
        total,
        || {
            let plain = gen_sentence(&mut rng);
            let ciph = key.apply(&plain);
            if rng.next_f64() < 0.5 {
                format!("e:{plain}>{ciph}")
            } else {
                format!("d:{ciph}>{plain}")
            }
        },
        "cipher",
    )?;
    Ok(split_corpus(Domain::Cipher, params, seed, lines, None))
}

/// Worded arithmetic with every letter enciphered; digits, '=' and the
/// answer stay intact. Deciphering the letters recovers a valid worded
/// arithmetic line.
pub fn gen_cipher_arith(params: &GenParams, seed: u64) -> Result<DomainCorpus> {
    params.validate()?;
    let key = params.key()?;
    let mut rng = Rng::seeded(seed).stream("gen/cipher-arith");
    let total = params.n_train + params.n_eval;
    let lines = fill_unique(
        total,
        || {
            let (operands, ops, value) = gen_arith_expr(params, &mut rng);
            key.apply(&render_arith(&operands, &ops, value, true))
        },
        "cipher_arith",
    )?;
    Ok(split_corpus(Domain::CipherArith, params, seed, lines, None))
}

/// The seed mixture: one quarter each of arith/code/cipher lines drawn
/// from the given corpora (train from train, eval from eval) plus one
/// quarter generic filler sentences.
pub fn gen_mixed(
    params: &GenParams,
    seed: u64,
    arith: &DomainCorpus,
    code: &DomainCorpus,
    cipher: &DomainCorpus,
) -> Result<DomainCorpus> {
    params.validate()?;
    let mut rng = Rng::seeded(seed).stream("gen/mixed");
    let mut build = |n: usize, eval_split: bool| -> (Vec<String>, Vec<Domain>) {
        let mut lines = Vec::with_capacity(n);
        let mut tags = Vec::with_capacity(n);
        for _ in 0..n {
            let pick = rng.below(4);
            let (line, tag) = match pick {
                0..=2 => {
                    let (corp, tag) = match pick {
                        0 => (arith, Domain::Arith),
                        1 => (code, Domain::Code),
                        _ => (cipher, Domain::Cipher),
                    };
                    let pool = if eval_split { &corp.eval } else { &corp.train };
                    (pool[rng.below(pool.len())].clone(), tag)
                }
                _ => (format!("{}.", gen_sentence(&mut rng)), Domain::Mixed),
            };
            lines.push(line);
            tags.push(tag);
        }
        (lines, tags)
    };
    let (train, train_tags) = build(params.n_train, false);
    let (eval, eval_tags) = build(params.n_eval, true);
    Ok(DomainCorpus {
        domain: Domain::Mixed,
        params: params.clone(),
        seed,
        train,
        eval,
        train_tags,
        eval_tags,
    })
}

/// Per-domain generation seeds.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSeeds {
    pub arith: u64,
    pub code: u64,
    pub cipher: u64,
    pub mixed: u64,
    pub cipher_arith: u64,
}

/// All five corpora generated coherently: mixed draws its domain lines
/// from the base corpora's own splits, so held-out eval stays held out.
pub struct CorpusSet {
    pub arith: DomainCorpus,
    pub code: DomainCorpus,
    pub cipher: DomainCorpus,
    pub mixed: DomainCorpus,
    pub cipher_arith: DomainCorpus,
}

impl CorpusSet {
    pub fn generate(params: &GenParams, mixed_n_train: usize, seeds: &DataSeeds) -> Result<Self> {
        let arith = gen_arith(params, seeds.arith)?;
        let code = gen_code(params, seeds.code)?;
        let cipher = gen_cipher(params, seeds.cipher)?;
        let mixed_params = GenParams {
            n_train: mixed_n_train,
            ..params.clone()
        };
        let mixed = gen_mixed(&mixed_params, seeds.mixed, &arith, &code, &cipher)?;
        let cipher_arith = gen_cipher_arith(params, seeds.cipher_arith)?;
        Ok(Self {
            arith,
            code,
            cipher,
            mixed,
            cipher_arith,
        })
    }

    pub fn get(&self, domain: Domain) -> &DomainCorpus {
        match domain {
            Domain::Arith => &self.arith,
            Domain::Code => &self.code,
            Domain::Cipher => &self.cipher,
            Domain::Mixed => &self.mixed,
            Domain::CipherArith => &self.cipher_arith,
        }
    }

    pub fn all(&self) -> [&DomainCorpus; 5] {
        [
            &self.arith,
            &self.code,
            &self.cipher,
            &self.mixed,
            &self.cipher_arith,
        ]
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        for c in self.all() {
            c.save(&dir.join(c.domain.as_str()))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Ok(Self {
            arith: DomainCorpus::load(&dir.join("arith"))?,
            code: DomainCorpus::load(&dir.join("code"))?,
            cipher: DomainCorpus::load(&dir.join("cipher"))?,
            mixed: DomainCorpus::load(&dir.join("mixed"))?,
            cipher_arith: DomainCorpus::load(&dir.join("cipher_arith"))?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_params() -> GenParams {
        GenParams {
            n_train: 400,
            n_eval: 80,
            ..GenParams::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let p = small_params();
        let a = gen_arith(&p, 7).unwrap();
        let b = gen_arith(&p, 7).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.eval, b.eval);
        let c = gen_arith(&p, 8).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn splits_are_line_disjoint() {
        let p = small_params();
        for corpus in [
            gen_arith(&p, 1).unwrap(),
            gen_code(&p, 2).unwrap(),
            gen_cipher(&p, 3).unwrap(),
            gen_cipher_arith(&p, 4).unwrap(),
        ] {
            let train: BTreeSet<_> = corpus.train.iter().collect();
            assert!(
                corpus.eval.iter().all(|l| !train.contains(l)),
                "{:?} splits overlap",
                corpus.domain
            );
        }
    }

    #[test]
    fn bad_params_are_rejected() {
        let mut p = small_params();
        p.max_operand = 0;
        assert!(gen_arith(&p, 1).is_err());
        let mut p = small_params();
        p.max_chain_ops = 4;
        assert!(gen_arith(&p, 1).is_err());
        let mut p = small_params();
        p.cipher_key = Some("notakey".into());
        assert!(gen_cipher(&p, 1).is_err());
    }

    #[test]
    fn identity_key_ciphertext_equals_plaintext() {
        let mut p = small_params();
        p.cipher_key = Some("abcdefghijklmnopqrstuvwxyz".into());
        let c = gen_cipher(&p, 5).unwrap();
        for line in c.train.iter().take(50) {
            let (pre, post) = line[2..].split_once('>').unwrap();
            assert_eq!(pre, post, "identity key must map text to itself");
        }
    }

    #[test]
    fn cipher_arith_letters_decode_to_valid_worded_arith() {
        let p = small_params();
        let key = p.key().unwrap();
        let c = gen_cipher_arith(&p, 6).unwrap();
        for line in c.train.iter().take(100) {
            let decoded = key.invert(line);
            assert!(
                evaluator::verify_line(Domain::Arith, &decoded, &key),
                "decoded line `{decoded}` is not a valid arith item"
            );
        }
    }

    #[test]
    fn all_generated_tokens_are_in_vocabulary() {
        let p = small_params();
        let a = gen_arith(&p, 1).unwrap();
        let c = gen_code(&p, 2).unwrap();
        let ci = gen_cipher(&p, 3).unwrap();
        let m = gen_mixed(&p, 9, &a, &c, &ci).unwrap();
        for corpus in [&a, &c, &ci, &m] {
            // encode() panics on out-of-vocabulary characters
            let _ = corpus.train_stream();
            let _ = corpus.eval_stream();
        }
    }

    #[test]
    fn eval_items_carry_prompts_and_answers() {
        let p = small_params();
        let a = gen_arith(&p, 1).unwrap();
        let items = a.eval_items(10);
        assert_eq!(items.len(), 10);
        for item in &items {
            assert!(item.prompt.ends_with('='));
            assert!(!item.answer.is_empty());
        }
        let c = gen_code(&p, 2).unwrap();
        for item in c.eval_items(10) {
            assert!(item.prompt.ends_with("output:"));
        }
    }

    #[test]
    fn save_load_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let p = small_params();
        let a = gen_arith(&p, 1).unwrap();
        a.save(tmp.path()).unwrap();
        let b = DomainCorpus::load(tmp.path()).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.eval, b.eval);
        assert_eq!(a.train_tags, b.train_tags);
    }

    #[test]
    fn mixed_tags_point_at_source_domains() {
        let p = small_params();
        let a = gen_arith(&p, 1).unwrap();
        let c = gen_code(&p, 2).unwrap();
        let ci = gen_cipher(&p, 3).unwrap();
        let m = gen_mixed(&p, 9, &a, &c, &ci).unwrap();
        let mut counts = std::collections::BTreeMap::new();
        for t in &m.train_tags {
            *counts.entry(*t).or_insert(0usize) += 1;
        }
        // Roughly a quarter each.
        for (_, n) in counts {
            assert!(n > p.n_train / 8, "unbalanced mixture");
        }
        // Items from the answerable tags resolve to prompts.
        let items = m.eval_items(1000);
        assert!(items.iter().all(|i| i.tag != Domain::Mixed));
    }
}
