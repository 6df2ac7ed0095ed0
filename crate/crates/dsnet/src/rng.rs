//! Deterministic random stream used for parameter init, dropout, shuffling
//! and augmentation.
//!
//! The generator is SplitMix64 (Steele, Lea & Flood; the same mixer used by
//! `java.util.SplittableRandom`). It is a repo constant: identical seeds and
//! identical call sequences produce bit-identical value streams on every
//! platform, which the dropout/augmentation determinism contracts rely on.

/// SplitMix64 stream. `state` starts at `seed` and advances by a fixed odd
/// constant per draw.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState {
    seed: u64,
    state: u64,
}

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

impl RngState {
    pub fn new(seed: u64) -> Self {
        RngState { seed, state: seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GAMMA);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1) with 53 random bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n). Uses modulo reduction; the bias is
    /// negligible for the dataset- and image-scale `n` used here.
    pub fn next_below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "next_below(0)");
        self.next_u64() % n
    }

    /// Uniform integer in [-range, range].
    pub fn next_offset(&mut self, range: i64) -> i64 {
        debug_assert!(range >= 0);
        self.next_below(2 * range as u64 + 1) as i64 - range
    }

    /// Standard normal via Box-Muller. Always consumes exactly two uniforms
    /// (no caching of the second value), so draw counts stay predictable.
    pub fn next_normal(&mut self) -> f64 {
        let mut u1 = self.next_f64();
        let u2 = self.next_f64();
        if u1 == 0.0 {
            u1 = f64::MIN_POSITIVE;
        }
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_seed_identical_stream() {
        let mut a = RngState::new(42);
        let mut b = RngState::new(42);
        for _ in 0..1000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn different_seeds_diverge() {
        let mut a = RngState::new(1);
        let mut b = RngState::new(2);
        assert_ne!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn uniforms_in_unit_interval() {
        let mut rng = RngState::new(7);
        for _ in 0..10_000 {
            let u = rng.next_f64();
            assert!((0.0..1.0).contains(&u));
        }
    }

    #[test]
    fn offsets_cover_range() {
        let mut rng = RngState::new(3);
        let mut seen = std::collections::HashSet::new();
        for _ in 0..1000 {
            let o = rng.next_offset(2);
            assert!((-2..=2).contains(&o));
            seen.insert(o);
        }
        assert_eq!(seen.len(), 5);
    }

    #[test]
    fn normal_moments_roughly_standard() {
        let mut rng = RngState::new(11);
        let n = 100_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let x = rng.next_normal();
            sum += x;
            sumsq += x * x;
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.03, "var {var}");
    }
}
