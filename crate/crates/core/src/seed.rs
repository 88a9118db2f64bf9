//! Deterministic randomness: one root seed, named sub-streams.
//!
//! Every consumer (init, data, batch order, ...) pulls its own ChaCha stream
//! derived from `(root, name)`, so editing one part of a config never shifts
//! the randomness seen by another.

use rand_chacha::ChaCha12Rng;
use rand_core::{RngCore, SeedableRng};

/// FNV-1a, fixed keys. `std::hash` is randomized per process and would break
/// run-to-run determinism.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Splits one root seed into independent named streams.
#[derive(Debug, Clone, Copy)]
pub struct SeedSplitter {
    root: u64,
}

impl SeedSplitter {
    pub fn new(root: u64) -> Self {
        Self { root }
    }

    pub fn root(&self) -> u64 {
        self.root
    }

    /// A fresh RNG for the given stream name. Same `(root, name)` always
    /// yields the same stream.
    pub fn stream(&self, name: &str) -> ChaCha12Rng {
        let mut state = self.root ^ fnv1a(name.as_bytes());
        let mut seed = [0u8; 32];
        for chunk in seed.chunks_exact_mut(8) {
            state = splitmix(state);
            chunk.copy_from_slice(&state.to_le_bytes());
        }
        ChaCha12Rng::from_seed(seed)
    }

    /// Derived splitter for nested scopes (e.g. one per sweep point).
    pub fn child(&self, name: &str) -> SeedSplitter {
        SeedSplitter {
            root: splitmix(self.root ^ fnv1a(name.as_bytes())),
        }
    }

    /// A stable u64 for APIs that take a plain seed.
    pub fn derive_u64(&self, name: &str) -> u64 {
        splitmix(self.root ^ fnv1a(name.as_bytes()))
    }
}

/// Uniform in [0, 1) with 53 bits of mantissa.
pub fn next_f64(rng: &mut impl RngCore) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Standard normal via Box-Muller. Two uniforms per call, no caching, so the
/// draw sequence is a pure function of the stream position.
pub fn next_gaussian(rng: &mut impl RngCore) -> f64 {
    let u1 = ((rng.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64); // (0, 1]
    let u2 = next_f64(rng);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
