//! Trivial character-bigram naive-Bayes classifier. Exists to demonstrate
//! that the base domains are separable, which is what lets experts
//! specialize.

use std::collections::BTreeMap;

use super::Domain;

pub struct BigramClassifier {
    classes: Vec<Domain>,
    /// log P(bigram | class), Laplace-smoothed
    loglik: Vec<BTreeMap<(char, char), f64>>,
    default_loglik: Vec<f64>,
    prior: Vec<f64>,
}

fn bigrams(line: &str) -> impl Iterator<Item = (char, char)> + '_ {
    let chars: Vec<char> = line.chars().collect();
    (1..chars.len()).map(move |i| (chars[i - 1], chars[i]))
}

impl BigramClassifier {
    pub fn train(corpora: &[(Domain, &[String])]) -> Self {
        let classes: Vec<Domain> = corpora.iter().map(|(d, _)| *d).collect();
        let mut loglik = Vec::new();
        let mut default_loglik = Vec::new();
        let prior = vec![(1.0 / corpora.len() as f64).ln(); corpora.len()];
        for (_, lines) in corpora {
            let mut counts: BTreeMap<(char, char), f64> = BTreeMap::new();
            let mut total = 0.0;
            for line in lines.iter() {
                for bg in bigrams(line) {
                    *counts.entry(bg).or_insert(0.0) += 1.0;
                    total += 1.0;
                }
            }
            let vocab = 64.0 * 64.0;
            let denom = total + vocab;
            let mut ll = BTreeMap::new();
            for (bg, c) in counts {
                ll.insert(bg, ((c + 1.0) / denom).ln());
            }
            loglik.push(ll);
            default_loglik.push((1.0 / denom).ln());
        }
        Self {
            classes,
            loglik,
            default_loglik,
            prior,
        }
    }

    pub fn classify(&self, line: &str) -> Domain {
        let mut best = 0usize;
        let mut best_score = f64::NEG_INFINITY;
        for (i, _) in self.classes.iter().enumerate() {
            let mut score = self.prior[i];
            for bg in bigrams(line) {
                score += self.loglik[i]
                    .get(&bg)
                    .copied()
                    .unwrap_or(self.default_loglik[i]);
            }
            if score > best_score {
                best_score = score;
                best = i;
            }
        }
        self.classes[best]
    }
}
