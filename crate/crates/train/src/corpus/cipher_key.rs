//! Fixed substitution cipher over the lowercase alphabet.

use stitchkit_core::rng::Rng;

use crate::error::TrainError;
use crate::Result;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CipherKey {
    /// map[i] = ciphertext letter for plaintext letter i
    map: [u8; 26],
    inv: [u8; 26],
}

impl CipherKey {
    pub fn identity() -> Self {
        let mut map = [0u8; 26];
        for (i, m) in map.iter_mut().enumerate() {
            *m = b'a' + i as u8;
        }
        Self { inv: map, map }
    }

    /// Random permutation derived from a seed.
    pub fn from_seed(seed: u64) -> Self {
        let mut letters: Vec<u8> = (b'a'..=b'z').collect();
        Rng::seeded(seed).stream("cipher/key").shuffle(&mut letters);
        let mut map = [0u8; 26];
        map.copy_from_slice(&letters);
        Self::from_map(map)
    }

    /// Explicit 26-letter key; must be a permutation of a-z.
    pub fn parse(key: &str) -> Result<Self> {
        let bytes = key.as_bytes();
        if bytes.len() != 26 {
            return Err(TrainError::BadKey(format!(
                "key must have 26 letters, got {}",
                bytes.len()
            )));
        }
        let mut seen = [false; 26];
        let mut map = [0u8; 26];
        for (i, &b) in bytes.iter().enumerate() {
            if !b.is_ascii_lowercase() {
                return Err(TrainError::BadKey(format!("non-letter {:?} in key", b as char)));
            }
            let idx = (b - b'a') as usize;
            if seen[idx] {
                return Err(TrainError::BadKey(format!(
                    "letter {:?} repeated; not a permutation",
                    b as char
                )));
            }
            seen[idx] = true;
            map[i] = b;
        }
        Ok(Self::from_map(map))
    }

    fn from_map(map: [u8; 26]) -> Self {
        let mut inv = [0u8; 26];
        for (i, &m) in map.iter().enumerate() {
            inv[(m - b'a') as usize] = b'a' + i as u8;
        }
        Self { map, inv }
    }

    pub fn as_string(&self) -> String {
        self.map.iter().map(|&b| b as char).collect()
    }

    /// Encipher: letters mapped, everything else unchanged.
    pub fn apply(&self, s: &str) -> String {
        s.chars()
            .map(|c| {
                if c.is_ascii_lowercase() {
                    self.map[(c as u8 - b'a') as usize] as char
                } else {
                    c
                }
            })
            .collect()
    }

    pub fn invert(&self, s: &str) -> String {
        s.chars()
            .map(|c| {
                if c.is_ascii_lowercase() {
                    self.inv[(c as u8 - b'a') as usize] as char
                } else {
                    c
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_key_maps_to_itself() {
        let k = CipherKey::identity();
        assert_eq!(k.apply("the cat runs 12+7"), "the cat runs 12+7");
    }

    #[test]
    fn apply_then_invert_is_identity() {
        let k = CipherKey::from_seed(99);
        let s = "a quick brown fox 42";
        assert_eq!(k.invert(&k.apply(s)), s);
    }

    #[test]
    fn bad_keys_are_rejected() {
        assert!(CipherKey::parse("abc").is_err());
        assert!(CipherKey::parse("aacdefghijklmnopqrstuvwxyz").is_err());
        assert!(CipherKey::parse("abcdefghijklmnopqrstuvwxyZ").is_err());
        assert!(CipherKey::parse("abcdefghijklmnopqrstuvwxyz").is_ok());
    }

    #[test]
    fn frequency_histogram_is_permuted_not_changed() {
        let k = CipherKey::from_seed(5);
        let s = "the cat sees the dog and the cat";
        let hist = |s: &str| {
            let mut h = [0usize; 26];
            for c in s.chars().filter(|c| c.is_ascii_lowercase()) {
                h[(c as u8 - b'a') as usize] += 1;
            }
            h
        };
        let plain = hist(s);
        let ciph = hist(&k.apply(s));
        // ciphertext histogram equals plaintext histogram permuted by key
        for i in 0..26 {
            let mapped = (k.map[i] - b'a') as usize;
            assert_eq!(plain[i], ciph[mapped]);
        }
        let mut sp: Vec<_> = plain.to_vec();
        let mut sc: Vec<_> = ciph.to_vec();
        sp.sort_unstable();
        sc.sort_unstable();
        assert_eq!(sp, sc);
    }
}
