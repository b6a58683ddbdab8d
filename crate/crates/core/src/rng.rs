//! Deterministic random numbers.
//!
//! The generator is xoshiro256** seeded through SplitMix64, so a stream can be
//! reproduced bit-for-bit from any language:
//!
//! * seeding: state words `s[0..4]` are four consecutive SplitMix64 outputs
//!   starting from the 64-bit seed;
//! * `uniform()` is `(next_u64() >> 11) * 2^-53`, which lies in `[0, 1)`;
//! * `below(n)` is the high word of the 128-bit product `next_u64() * n`;
//! * `normal()` is Box-Muller on two uniforms, `sqrt(-2 ln(1 - u1)) * cos(2 pi u2)`,
//!   one draw per call (the sine half is discarded);
//! * `fork(stream)` seeds a child generator with
//!   `splitmix64(seed ^ splitmix64(stream))`, independent of how much of the
//!   parent stream has been consumed.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// One SplitMix64 output for the given state value.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Well-known sub-stream identifiers derived from a run seed.
pub mod streams {
    pub const MASKS: u64 = 1;
    pub const EXPERTS: u64 = 2;
    pub const DATA_ORDER: u64 = 3;
    pub const AUGMENT: u64 = 4;
    pub const INIT: u64 = 5;
    pub const INFERENCE: u64 = 6;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rng {
    seed: u64,
    s: [u64; 4],
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        let mut x = seed;
        let mut s = [0u64; 4];
        for w in s.iter_mut() {
            *w = splitmix64(x);
            x = x.wrapping_add(GOLDEN);
        }
        Rng { seed, s }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream, a pure function of `(seed, stream)`.
    pub fn fork(&self, stream: u64) -> Rng {
        Rng::new(splitmix64(self.seed ^ splitmix64(stream)))
    }

    pub fn next_u64(&mut self) -> u64 {
        let result = self.s[1].wrapping_mul(5).rotate_left(7).wrapping_mul(9);
        let t = self.s[1] << 17;
        self.s[2] ^= self.s[0];
        self.s[3] ^= self.s[1];
        self.s[1] ^= self.s[2];
        self.s[0] ^= self.s[3];
        self.s[2] ^= t;
        self.s[3] = self.s[3].rotate_left(45);
        result
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Integer in `0..n`. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform();
        let u2 = self.uniform();
        (-2.0 * (1.0 - u1).ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Fisher-Yates, walking from the back.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..1000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn splitmix_reference_values() {
        // Reference outputs of SplitMix64 seeded with 0 (first three draws).
        let mut x = 0u64;
        let mut out = vec![];
        for _ in 0..3 {
            out.push(splitmix64(x));
            x = x.wrapping_add(GOLDEN);
        }
        assert_eq!(out, vec![0xE220_A839_7B1D_CDAF, 0x6E78_9E6A_A1B9_65F4, 0x06C4_5D18_8009_454F]);
    }

    #[test]
    fn uniform_in_unit_interval() {
        let mut r = Rng::new(7);
        for _ in 0..10_000 {
            let u = r.uniform();
            assert!((0.0..1.0).contains(&u));
        }
    }

    #[test]
    fn fork_ignores_parent_position() {
        let a = Rng::new(9);
        let mut b = Rng::new(9);
        b.next_u64();
        assert_eq!(a.fork(3), b.fork(3));
        assert_ne!(a.fork(3), a.fork(4));
    }

    #[test]
    fn normal_moments() {
        let mut r = Rng::new(1);
        let n = 200_000;
        let xs: Vec<f64> = (0..n).map(|_| r.normal()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }
}
