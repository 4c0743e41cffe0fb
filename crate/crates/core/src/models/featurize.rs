//! Hashed bag-of-words features.

use crate::rng::fnv1a64;

/// Sparse vector as `(index, value)` pairs, indices strictly increasing.
pub type SparseVec = Vec<(u32, f64)>;

/// Lowercased alphanumeric tokens hashed with FNV-1a 64 into `dim` buckets;
/// the value of a bucket is the token count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashedBowFeaturizer {
    pub dim: usize,
    /// Tokens past this count are ignored.
    pub max_tokens: usize,
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

impl HashedBowFeaturizer {
    /// `None` unless `dim` is a power of two.
    pub fn new(dim: usize, max_tokens: usize) -> Option<Self> {
        dim.is_power_of_two().then_some(HashedBowFeaturizer { dim, max_tokens })
    }

    pub fn index(&self, token: &str) -> u32 {
        (fnv1a64(token.as_bytes()) & (self.dim as u64 - 1)) as u32
    }

    pub fn featurize(&self, text: &str) -> SparseVec {
        let mut idx: Vec<u32> = tokenize(text)
            .iter()
            .take(self.max_tokens)
            .map(|t| self.index(t))
            .collect();
        idx.sort_unstable();
        let mut out: SparseVec = Vec::new();
        for i in idx {
            match out.last_mut() {
                Some((j, c)) if *j == i => *c += 1.0,
                _ => out.push((i, 1.0)),
            }
        }
        out
    }
}
