//! Canonical enumeration of unordered token pairs, with seeded subsampling
//! once the pair count exceeds a budget.

use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const DEFAULT_PAIR_BUDGET: usize = 2_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PairPlan {
    pub budget: usize,
    pub seed: u64,
}

impl Default for PairPlan {
    fn default() -> Self {
        Self {
            budget: DEFAULT_PAIR_BUDGET,
            seed: 0,
        }
    }
}

/// Pairs `(i, j)` with `i < j`, sorted, and whether they were subsampled.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairSet {
    pub pairs: Vec<(usize, usize)>,
    pub subsampled: bool,
    pub seed: u64,
}

/// Number of unordered pairs among `n` items.
pub fn pair_count(n: usize) -> usize {
    n * n.saturating_sub(1) / 2
}

/// Maps a linear index in `0..pair_count(n)` to `(i, j)`, `i < j`, in
/// row-major order over the strict upper triangle.
pub fn pair_from_index(n: usize, mut idx: usize) -> (usize, usize) {
    let mut i = 0;
    loop {
        let row = n - 1 - i;
        if idx < row {
            return (i, i + 1 + idx);
        }
        idx -= row;
        i += 1;
    }
}

impl PairPlan {
    /// All pairs among `n` items, or a seeded sample of `budget` of them.
    pub fn select(&self, n: usize) -> PairSet {
        let total = pair_count(n);
        if total <= self.budget {
            let mut pairs = Vec::with_capacity(total);
            for i in 0..n {
                for j in i + 1..n {
                    pairs.push((i, j));
                }
            }
            return PairSet {
                pairs,
                subsampled: false,
                seed: self.seed,
            };
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut picked = rand::seq::index::sample(&mut rng, total, self.budget).into_vec();
        picked.sort_unstable();
        let mut pairs = Vec::with_capacity(picked.len());
        // walk rows once instead of decoding each index from scratch
        let (mut i, mut row_start) = (0usize, 0usize);
        for idx in picked {
            while idx >= row_start + (n - 1 - i) {
                row_start += n - 1 - i;
                i += 1;
            }
            pairs.push((i, i + 1 + idx - row_start));
        }
        PairSet {
            pairs,
            subsampled: true,
            seed: self.seed,
        }
    }

    /// Restricts to pairs wholly inside one of the given spans.
    pub fn select_within(&self, spans: &[core::ops::Range<usize>]) -> PairSet {
        let mut all = Vec::new();
        for s in spans {
            for i in s.clone() {
                for j in i + 1..s.end {
                    all.push((i, j));
                }
            }
        }
        all.sort_unstable();
        if all.len() <= self.budget {
            return PairSet {
                pairs: all,
                subsampled: false,
                seed: self.seed,
            };
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut picked = rand::seq::index::sample(&mut rng, all.len(), self.budget).into_vec();
        picked.sort_unstable();
        PairSet {
            pairs: picked.into_iter().map(|k| all[k]).collect(),
            subsampled: true,
            seed: self.seed,
        }
    }
}
