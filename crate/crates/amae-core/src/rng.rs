//! Deterministic splittable random number generator.
//!
//! A SplitMix64 core: the state is a counter advanced by a fixed odd
//! constant and each output is a finalizer hash of the counter. Streams
//! are derived, not consumed — `derive` hashes (base seed, tag) into a
//! fresh seed, so per-image / per-epoch generators can be handed to
//! parallel workers without any shared state.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix(mut z: u64) -> u64 {
    z ^= z >> 30;
    z = z.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^= z >> 27;
    z = z.wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100_0000_01b3);
    }
    hash
}

#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    state: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { seed, state: seed }
    }

    /// Seed this generator was created with (also its stream id).
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Child stream keyed by an integer tag. Pure function of the parent
    /// seed — deriving never consumes parent state.
    pub fn derive(&self, tag: u64) -> Rng {
        Rng::new(mix(self.seed ^ mix(tag.wrapping_mul(GOLDEN).wrapping_add(GOLDEN))))
    }

    /// Child stream keyed by a label.
    pub fn derive_str(&self, label: &str) -> Rng {
        self.derive(fnv1a(label.as_bytes()))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        mix(self.state)
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.f64()
    }

    /// Uniform index in [0, n). Rejection sampling keeps it unbiased.
    pub fn index(&mut self, n: usize) -> usize {
        assert!(n > 0, "index() needs n > 0");
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
    }

    /// Uniform integer in [lo, hi] inclusive.
    pub fn int_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        assert!(lo <= hi);
        lo + self.index(hi - lo + 1)
    }

    /// Standard normal via Box–Muller (two uniforms per draw).
    pub fn normal(&mut self) -> f64 {
        let u1 = loop {
            let u = self.f64();
            if u > 0.0 {
                break u;
            }
        };
        let u2 = self.f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Normal(0, sigma) truncated to [-cutoff, cutoff] by rejection.
    pub fn trunc_normal(&mut self, sigma: f64, cutoff: f64) -> f64 {
        loop {
            let v = self.normal() * sigma;
            if v.abs() <= cutoff {
                return v;
            }
        }
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.index(i + 1);
            xs.swap(i, j);
        }
    }
}

/// Stable 64-bit hash of a byte string (used for config fingerprints and
/// parameter digests as well as label-derived streams).
pub fn hash_bytes(bytes: &[u8]) -> u64 {
    fnv1a(bytes)
}
