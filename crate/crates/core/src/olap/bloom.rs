//! Bloom filter with standard sizing and double hashing.

use super::{hash_key, mix64};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BloomFilter {
    words: Vec<u64>,
    bits: u64,
    hashes: u32,
    seed: u64,
    epsilon_millionths: u64,
}

impl BloomFilter {
    /// An empty filter sized for `expected` keys at false-positive rate
    /// `epsilon`: `m = -n ln(eps) / ln(2)^2` bits and `k = round(m/n ln 2)`.
    pub fn with_rate(expected: usize, epsilon: f64, seed: u64) -> Self {
        assert!(epsilon > 0.0 && epsilon < 1.0, "epsilon must be in (0, 1)");
        let n = expected.max(1) as f64;
        let ln2 = std::f64::consts::LN_2;
        let bits = ((-n * epsilon.ln()) / (ln2 * ln2)).ceil().max(64.0) as u64;
        let hashes = ((bits as f64 / n) * ln2).round().max(1.0) as u32;
        BloomFilter {
            words: vec![0; bits.div_ceil(64) as usize],
            bits,
            hashes,
            seed,
            epsilon_millionths: (epsilon * 1e6).round() as u64,
        }
    }

    pub fn build(keys: impl IntoIterator<Item = u64>, expected: usize, epsilon: f64, seed: u64) -> Self {
        let mut f = BloomFilter::with_rate(expected, epsilon, seed);
        keys.into_iter().for_each(|k| f.insert(k));
        f
    }

    pub fn bits(&self) -> u64 {
        self.bits
    }

    pub fn hashes(&self) -> u32 {
        self.hashes
    }

    fn probes(&self, key: u64) -> impl Iterator<Item = u64> {
        let h1 = hash_key(key, self.seed);
        let h2 = mix64(h1) | 1;
        let m = self.bits;
        (0..self.hashes as u64).map(move |i| h1.wrapping_add(i.wrapping_mul(h2)) % m)
    }

    pub fn insert(&mut self, key: u64) {
        for b in self.probes(key) {
            self.words[(b / 64) as usize] |= 1 << (b % 64);
        }
    }

    pub fn contains(&self, key: u64) -> bool {
        self.probes(key).all(|b| self.words[(b / 64) as usize] & (1 << (b % 64)) != 0)
    }

    /// Ors in a filter built with the same sizing and seed.
    pub fn union_with(&mut self, other: &BloomFilter) {
        assert!(self.same_shape(other), "filters differ in shape");
        for (a, b) in self.words.iter_mut().zip(&other.words) {
            *a |= b;
        }
    }

    fn same_shape(&self, other: &BloomFilter) -> bool {
        (self.bits, self.hashes, self.seed, self.epsilon_millionths)
            == (other.bits, other.hashes, other.seed, other.epsilon_millionths)
    }

    /// Bit array as little-endian words, for shipping.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.words.iter().flat_map(|w| w.to_le_bytes()).collect()
    }

    /// Replaces the bit array with one produced by [`Self::to_bytes`] on a
    /// filter of the same shape.
    pub fn load_bytes(&mut self, bytes: &[u8]) {
        assert_eq!(bytes.len(), self.words.len() * 8, "filter size");
        for (w, b) in self.words.iter_mut().zip(bytes.chunks_exact(8)) {
            *w = u64::from_le_bytes(b.try_into().expect("8 bytes"));
        }
    }
}
