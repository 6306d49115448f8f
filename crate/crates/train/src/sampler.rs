//! Weighted mixture sampling over corpus token streams. Every sequence in
//! a batch picks a corpus by normalized weight, then a random window of
//! seq_len+1 tokens (the +1 feeds next-token targets).

use stitchkit_core::rng::Rng;

use crate::corpus::DomainCorpus;
use crate::error::TrainError;
use crate::Result;

pub struct MixtureSampler {
    streams: Vec<Vec<u32>>,
    weights: Vec<f64>,
    pub seq_len: usize,
    rng: Rng,
}

impl MixtureSampler {
    pub fn new(spec: &[(&DomainCorpus, f64)], seq_len: usize, rng: Rng) -> Result<Self> {
        let spec: Vec<_> = spec.iter().filter(|(_, w)| *w > 0.0).collect();
        if spec.is_empty() || spec.iter().map(|(_, w)| w).sum::<f64>() <= 0.0 {
            return Err(TrainError::EmptyMixture);
        }
        let mut streams = Vec::new();
        let mut weights = Vec::new();
        for (corpus, w) in spec {
            let stream = corpus.train_stream();
            if stream.len() < seq_len + 1 {
                return Err(TrainError::InsufficientData(format!(
                    "{} train stream of {} tokens is shorter than a window",
                    corpus.domain.as_str(),
                    stream.len()
                )));
            }
            streams.push(stream);
            weights.push(*w);
        }
        Ok(Self {
            streams,
            weights,
            seq_len,
            rng: rng.stream("mixture"),
        })
    }

    /// Next batch of `n_seqs` rows, each seq_len+1 tokens.
    pub fn next_batch(&mut self, n_seqs: usize) -> Vec<u32> {
        let w = self.seq_len + 1;
        let mut out = Vec::with_capacity(n_seqs * w);
        for _ in 0..n_seqs {
            let c = self.rng.weighted(&self.weights);
            let stream = &self.streams[c];
            let start = self.rng.below(stream.len() - w);
            out.extend_from_slice(&stream[start..start + w]);
        }
        out
    }

    /// Index of the corpus each of the next `n` draws would come from;
    /// used by proportion tests.
    pub fn peek_choices(&mut self, n: usize) -> Vec<usize> {
        (0..n).map(|_| self.rng.weighted(&self.weights)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{gen_arith, gen_code, GenParams};

    fn corpora() -> (DomainCorpus, DomainCorpus) {
        let p = GenParams {
            n_train: 500,
            n_eval: 50,
            ..GenParams::default()
        };
        (gen_arith(&p, 1).unwrap(), gen_code(&p, 2).unwrap())
    }

    #[test]
    fn empty_mixture_is_rejected() {
        let (a, _) = corpora();
        assert!(matches!(
            MixtureSampler::new(&[(&a, 0.0)], 32, Rng::seeded(1)),
            Err(TrainError::EmptyMixture)
        ));
        assert!(matches!(
            MixtureSampler::new(&[], 32, Rng::seeded(1)),
            Err(TrainError::EmptyMixture)
        ));
    }

    #[test]
    fn single_corpus_mixture_draws_everything_from_it() {
        let (a, _) = corpora();
        let mut s = MixtureSampler::new(&[(&a, 3.0)], 32, Rng::seeded(2)).unwrap();
        assert!(s.peek_choices(100).iter().all(|&c| c == 0));
        let batch = s.next_batch(4);
        assert_eq!(batch.len(), 4 * 33);
    }

    #[test]
    fn fifty_fifty_proportions_within_binomial_bound() {
        let (a, b) = corpora();
        let mut s = MixtureSampler::new(&[(&a, 1.0), (&b, 1.0)], 32, Rng::seeded(7)).unwrap();
        let n = 10_000;
        let picks = s.peek_choices(n);
        let frac = picks.iter().filter(|&&c| c == 0).count() as f64 / n as f64;
        assert!((0.48..=0.52).contains(&frac), "fraction {frac}");
    }

    #[test]
    fn batches_are_deterministic_given_seed() {
        let (a, b) = corpora();
        let mut s1 = MixtureSampler::new(&[(&a, 0.3), (&b, 0.7)], 16, Rng::seeded(9)).unwrap();
        let mut s2 = MixtureSampler::new(&[(&a, 0.3), (&b, 0.7)], 16, Rng::seeded(9)).unwrap();
        for _ in 0..5 {
            assert_eq!(s1.next_batch(8), s2.next_batch(8));
        }
    }
}
