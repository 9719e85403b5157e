//! Counter-based pseudo-random stream.
//!
//! The generator below is part of the crate's compatibility contract: its
//! output for a given seed is frozen. Changing any constant or the draw
//! order of the composite samplers is a breaking change, because generated
//! datasets, parameter initializations, and shuffles are all keyed to it.
//!
//! Definition. Draw `k` (1-based) of stream `s` is
//!
//! ```text
//! out_k = mix64(s.wrapping_add(k.wrapping_mul(0x9E3779B97F4A7C15)))
//! ```
//!
//! where `mix64` is the SplitMix64 finalizer (xor-shift 30, multiply
//! 0xBF58476D1CE4E5B9, xor-shift 27, multiply 0x94D049BB133111EB,
//! xor-shift 31). Uniform doubles take the top 53 bits; standard-normal
//! draws are the Irwin-Hall transform `sum of 12 uniforms - 6`, which has
//! exactly zero mean and unit variance and uses only exactly-rounded
//! additions, so sequences are bitwise identical across platforms.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive an independent seed for a named substream of `seed`.
///
/// Runs that need several logically separate streams (weight init, batch
/// shuffling, augmentation, ...) derive one per purpose so that adding a
/// consumer never perturbs the draws seen by another.
pub fn substream_seed(seed: u64, stream: u64) -> u64 {
    mix64(mix64(seed) ^ mix64(stream.wrapping_add(1)))
}

/// Deterministic counter-based random stream. See the module docs for the
/// exact frozen definition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngStream {
    seed: u64,
    counter: u64,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        RngStream { seed, counter: 0 }
    }

    /// Stream for purpose `stream` under the run seed `seed`.
    pub fn with_stream(seed: u64, stream: u64) -> Self {
        RngStream::new(substream_seed(seed, stream))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Raw 64-bit draw; advances the counter by one.
    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.seed.wrapping_add(self.counter.wrapping_mul(GOLDEN)))
    }

    /// Uniform draw in `[0, 1)` with 53-bit resolution.
    #[inline]
    pub fn next_uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / 9_007_199_254_740_992.0)
    }

    /// Uniform draw in `[lo, hi)`.
    pub fn next_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_uniform()
    }

    /// Standard-normal draw (Irwin-Hall transform of 12 uniforms).
    pub fn next_normal(&mut self) -> f64 {
        let mut acc = 0.0;
        for _ in 0..12 {
            acc += self.next_uniform();
        }
        acc - 6.0
    }

    /// Unbiased integer draw in `[0, n)` by rejection.
    pub fn next_below(&mut self, n: usize) -> usize {
        assert!(n > 0, "next_below needs n > 0");
        let n64 = n as u64;
        let zone = u64::MAX - (u64::MAX % n64);
        loop {
            let v = self.next_u64();
            if v < zone {
                return (v % n64) as usize;
            }
        }
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.next_below(i + 1);
            xs.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_sequence() {
        let mut a = RngStream::new(123);
        let mut b = RngStream::new(123);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn distinct_seeds_distinct_sequences() {
        let mut a = RngStream::new(1);
        let mut b = RngStream::new(2);
        let same = (0..64).all(|_| a.next_u64() == b.next_u64());
        assert!(!same);
    }

    #[test]
    fn substreams_are_independent_of_each_other() {
        let a: Vec<u64> = {
            let mut s = RngStream::with_stream(9, 0);
            (0..16).map(|_| s.next_u64()).collect()
        };
        let b: Vec<u64> = {
            let mut s = RngStream::with_stream(9, 1);
            (0..16).map(|_| s.next_u64()).collect()
        };
        assert_ne!(a, b);
    }

    #[test]
    fn uniform_mean_near_half() {
        let mut rng = RngStream::new(2024);
        let n = 100_000;
        let mean = (0..n).map(|_| rng.next_uniform()).sum::<f64>() / n as f64;
        assert!((0.49..=0.51).contains(&mean), "mean {mean}");
    }

    #[test]
    fn uniform_stays_in_unit_interval() {
        let mut rng = RngStream::new(5);
        for _ in 0..10_000 {
            let u = rng.next_uniform();
            assert!((0.0..1.0).contains(&u));
        }
    }

    #[test]
    fn normal_sample_variance_near_one() {
        let mut rng = RngStream::new(77);
        let n = 100_000;
        let xs: Vec<f64> = (0..n).map(|_| rng.next_normal()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n as f64 - 1.0);
        assert!((0.97..=1.03).contains(&var), "variance {var}");
        assert!(mean.abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn shuffle_is_a_permutation() {
        let mut rng = RngStream::new(11);
        let mut xs: Vec<usize> = (0..50).collect();
        rng.shuffle(&mut xs);
        let mut sorted = xs.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn next_below_is_in_range_and_deterministic() {
        let mut a = RngStream::new(3);
        let mut b = RngStream::new(3);
        for _ in 0..1000 {
            let x = a.next_below(7);
            assert!(x < 7);
            assert_eq!(x, b.next_below(7));
        }
    }
}
