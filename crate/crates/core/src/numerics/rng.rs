//! Counter-based SplitMix64 generator.
//!
//! The `i`-th output of a stream with key `k` is `mix64(k + (i + 1) * GAMMA)`
//! where `GAMMA = 0x9E3779B97F4A7C15` and `mix64` is the SplitMix64 finalizer.
//! Only wrapping integer arithmetic is involved, so streams are identical on
//! every platform. Child streams are keyed by mixing the parent key with a
//! label, which lets every batch element / bench item own an independent
//! stream derived from `(global seed, index)`.

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rng {
    key: u64,
    counter: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            key: mix64(seed ^ 0x6A09_E667_F3BC_C908),
            counter: 0,
        }
    }

    /// Independent stream for `label`, without advancing `self`.
    pub fn derive(&self, label: u64) -> Rng {
        Rng {
            key: mix64(self.key ^ mix64(label.wrapping_add(GAMMA))),
            counter: 0,
        }
    }

    /// Stream keyed by a string label (stable FNV-1a hash).
    pub fn derive_str(&self, label: &str) -> Rng {
        self.derive(fnv1a(label.as_bytes()))
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.key.wrapping_add(self.counter.wrapping_mul(GAMMA)))
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        ((self.uniform() * n as f64) as usize).min(n - 1)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Standard normal draw (Box-Muller, cosine branch only).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform(); // (0, 1]
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}
