//! SplitMix64 and a partial Fisher–Yates shuffle.
//!
//! Both are spelled out here (rather than taken from `rand`) because the
//! sampled subsets must be bit-identical to any other implementation fed
//! the same seed.

/// Steele/Lea/Flood SplitMix64.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1) from the top 53 bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

/// First `k` positions of a Fisher–Yates shuffle of `0..n`.
///
/// Step `i` swaps position `i` with `i + next_u64() % (n - i)`. The plain
/// modulo is part of the contract; do not replace it with rejection
/// sampling.
pub fn partial_shuffle(n: usize, k: usize, seed: u64) -> Vec<usize> {
    assert!(k <= n, "cannot take {k} of {n}");
    let mut rng = SplitMix64::new(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let span = (n - i) as u64;
        let j = i + (rng.next_u64() % span) as usize;
        idx.swap(i, j);
    }
    idx.truncate(k);
    idx
}
