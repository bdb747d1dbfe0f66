//! Deterministic pseudo-randomness built from counter-based mixing.
//!
//! Every random quantity in the crate (parameter init, batch shuffles,
//! synthetic data, DP noise) is derived from 64-bit keys through the same
//! avalanche function, so results depend only on the keys and never on
//! thread scheduling or call order.

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

/// SplitMix64 finalizer. Full avalanche: every input bit affects every
/// output bit.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Combines key material into a single 64-bit key.
pub fn key(parts: &[u64]) -> u64 {
    let mut h = 0x853c_49e6_748f_ea9b;
    for &p in parts {
        h = mix64(h ^ p.wrapping_add(GOLDEN));
    }
    h
}

/// FNV-1a over raw bytes. Used for parameter-name keys and the
/// checkpoint payload digest.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[inline]
fn to_unit(x: u64) -> f64 {
    // [0, 1): top 53 bits.
    (x >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

#[inline]
fn to_unit_open(x: u64) -> f64 {
    // (0, 1]: never zero, safe for ln().
    ((x >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
}

#[inline]
fn box_muller(a: u64, b: u64) -> f64 {
    let r = (-2.0 * to_unit_open(a).ln()).sqrt();
    r * (std::f64::consts::TAU * to_unit(b)).cos()
}

/// Sequential SplitMix64 stream seeded from a key.
#[derive(Clone, Debug)]
pub struct StreamRng {
    state: u64,
}

impl StreamRng {
    pub fn new(parts: &[u64]) -> Self {
        Self { state: key(parts) }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        mix64(self.state)
    }

    /// Uniform in [0, 1).
    #[inline]
    pub fn next_unit(&mut self) -> f64 {
        to_unit(self.next_u64())
    }

    /// Uniform in [lo, hi).
    #[inline]
    pub fn next_uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_unit()
    }

    /// Standard normal via Box-Muller (two draws per sample).
    #[inline]
    pub fn next_gaussian(&mut self) -> f64 {
        let a = self.next_u64();
        let b = self.next_u64();
        box_muller(a, b)
    }

    /// Uniform integer in [0, n). Widening-multiply reduction; bias is
    /// below 2^-63 for the n used here.
    #[inline]
    pub fn next_below(&mut self, n: usize) -> usize {
        ((u128::from(self.next_u64()) * n as u128) >> 64) as usize
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_below(i + 1);
            items.swap(i, j);
        }
    }

    /// Weighted index draw from unnormalized nonnegative weights.
    pub fn next_weighted(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        let mut t = self.next_unit() * total;
        for (i, &w) in weights.iter().enumerate() {
            t -= w;
            if t < 0.0 {
                return i;
            }
        }
        weights.len() - 1
    }
}

/// Counter-based Gaussian stream: each coordinate's value is a pure
/// function of (key parts, coordinate), so draws can be generated in any
/// order, in parallel, with identical results.
#[derive(Clone, Copy, Debug)]
pub struct NoiseStream {
    base: u64,
}

impl NoiseStream {
    pub fn new(parts: &[u64]) -> Self {
        Self { base: key(parts) }
    }

    /// Standard normal for a coordinate index.
    #[inline]
    pub fn gaussian(&self, coord: u64) -> f64 {
        let a = mix64(self.base ^ (2 * coord).wrapping_mul(GOLDEN));
        let b = mix64(self.base ^ (2 * coord + 1).wrapping_mul(GOLDEN));
        box_muller(a, b)
    }
}
