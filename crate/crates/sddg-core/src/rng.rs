//! Counter-based random numbers: every draw is a pure function of
//! `(seed, indices)`.
//!
//! Simulation noise is addressed as `normal(seed, &[k, d, b])` for time
//! step `k`, Brownian dimension `d`, batch column `b`. Because draws are
//! position-addressed rather than sequence-addressed, evaluation may be
//! chunked over the batch (or parallelized) without changing a single
//! sample, which is what makes the bitwise reproducibility guarantee
//! possible.
//!
//! The generator is a splitmix64-style finalizer applied to a sequentially
//! absorbed counter state; normals come from Box–Muller using exactly two
//! uniforms per draw. Uniforms are bin centers `(n + 0.5) / 2^53`, so they
//! never hit 0 or 1 and `ln(u)` is always finite.

/// 2^64 / golden ratio; the usual sequence constant for splitmix64.
const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;
/// Distinct salts for the two Box–Muller uniforms (digits of pi).
const SALT_U1: u64 = 0x243F_6A88_85A3_08D3;
const SALT_U2: u64 = 0x1319_8A2E_0370_7344;

/// splitmix64 finalizer: a fast, well-tested 64-bit mixer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Fold one counter into the state. Mixing between absorptions makes the
/// combined map order-sensitive: `(1,2)` and `(2,1)` land far apart.
#[inline]
fn absorb(state: u64, value: u64) -> u64 {
    mix64(state ^ value.wrapping_add(GOLDEN).wrapping_mul(0xD134_2543_DE82_EF95))
}

#[inline]
fn absorb_all(seed: u64, idx: &[u64]) -> u64 {
    let mut s = mix64(seed.wrapping_add(GOLDEN));
    for &v in idx {
        s = absorb(s, v);
    }
    s
}

/// Hash a label string into a 64-bit stream tag (used to split off
/// independent seed domains such as training vs evaluation noise).
pub fn hash_str(s: &str) -> u64 {
    let mut state = mix64(s.len() as u64 ^ GOLDEN);
    for chunk in s.as_bytes().chunks(8) {
        let mut word = [0u8; 8];
        word[..chunk.len()].copy_from_slice(chunk);
        state = absorb(state, u64::from_le_bytes(word));
    }
    state
}

/// Derive a sub-seed from a master seed and a list of counters
/// (e.g. `[round, player, step]`). Pure and collision-resistant enough
/// that distinct tuples give independent-looking streams.
pub fn derive_seed(master: u64, parts: &[u64]) -> u64 {
    absorb_all(master, parts)
}

/// Derive a sub-seed with a string tag plus counters.
pub fn derive_seed_tagged(master: u64, tag: &str, parts: &[u64]) -> u64 {
    let mut s = absorb(mix64(master.wrapping_add(GOLDEN)), hash_str(tag));
    for &v in parts {
        s = absorb(s, v);
    }
    s
}

/// Uniform draw in the open interval (0, 1) at the given counter position.
#[inline]
pub fn uniform01(seed: u64, idx: &[u64]) -> f64 {
    bits_to_unit(absorb_all(seed, idx))
}

/// Uniform draw in `[lo, hi)` at the given counter position.
#[inline]
pub fn uniform_in(seed: u64, idx: &[u64], lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * uniform01(seed, idx)
}

/// Standard normal draw at the given counter position (Box–Muller,
/// cosine branch, exactly two uniforms derived from the same position).
#[inline]
pub fn normal(seed: u64, idx: &[u64]) -> f64 {
    let state = absorb_all(seed, idx);
    let u1 = bits_to_unit(absorb(state, SALT_U1));
    let u2 = bits_to_unit(absorb(state, SALT_U2));
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Map 64 random bits to the center of one of 2^52 bins in (0,1).
/// Bin centers keep `n + 0.5` exactly representable, so the result is
/// strictly inside the interval (2^53 bins would round the top bin to 1.0).
#[inline]
fn bits_to_unit(bits: u64) -> f64 {
    ((bits >> 12) as f64 + 0.5) * (1.0 / 4_503_599_627_370_496.0)
}
