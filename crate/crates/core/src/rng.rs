//! Splittable counter-based PRNG.
//!
//! One root generator is seeded from the run config; every stochastic site
//! (weight init, dropout, data sampling) derives a named substream so the
//! draw sequence at one site is independent of how often any other site is
//! consulted. Output for a given (seed, stream name, counter) triple is a
//! pure function, which is what makes whole runs replayable.

const GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

/// SplitMix64 finalizer; full-period bijective mixer.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn hash_name(name: &str) -> u64 {
    // FNV-1a, then strengthened through the mixer.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    mix(h)
}

#[derive(Debug, Clone)]
pub struct Rng {
    key: u64,
    counter: u64,
}

impl Rng {
    pub fn seeded(seed: u64) -> Self {
        Self {
            key: mix(seed ^ GAMMA),
            counter: 0,
        }
    }

    /// Derive an independent named substream. The parent is unaffected.
    pub fn stream(&self, name: &str) -> Self {
        Self {
            key: mix(self.key ^ hash_name(name)),
            counter: 0,
        }
    }

    /// Derive an indexed substream, e.g. one per layer or shard.
    pub fn stream_idx(&self, name: &str, idx: u64) -> Self {
        Self {
            key: mix(self.key ^ hash_name(name) ^ mix(idx.wrapping_mul(GAMMA))),
            counter: 0,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        let c = self.counter;
        self.counter = self.counter.wrapping_add(1);
        mix(self.key.wrapping_add(c.wrapping_mul(GAMMA)))
    }

    /// Uniform in [0, 1).
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n). n must be nonzero.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_f64() * n as f64) as usize % n
    }

    /// Inclusive integer range.
    pub fn range_inclusive(&mut self, lo: i64, hi: i64) -> i64 {
        debug_assert!(lo <= hi);
        lo + self.below((hi - lo + 1) as usize) as i64
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = (self.next_f64()).max(1e-300);
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Weighted index choice; weights must be nonnegative with positive sum.
    pub fn weighted(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        debug_assert!(total > 0.0);
        let mut dart = self.next_f64() * total;
        for (i, w) in weights.iter().enumerate() {
            dart -= w;
            if dart <= 0.0 {
                return i;
            }
        }
        weights.len() - 1
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }
}
