//! Named, seeded RNG streams.
//!
//! Every source of randomness in the crate draws from a stream derived
//! from `(global_seed, purpose, indices...)`. Streams are independent of
//! evaluation order and thread count: a gate sampled at step 17 sees the
//! same noise whether or not another gate was sampled first.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a over a byte string; used to turn stream names into tags.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// splitmix64 finalizer; decorrelates nearby seeds.
fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A stream identity: a purpose label plus up to three indices.
#[derive(Debug, Clone, Copy)]
pub struct StreamKey<'a> {
    pub purpose: &'a str,
    pub indices: [u64; 3],
}

impl<'a> StreamKey<'a> {
    pub fn new(purpose: &'a str) -> Self {
        StreamKey {
            purpose,
            indices: [0; 3],
        }
    }

    pub fn with(purpose: &'a str, a: u64, b: u64, c: u64) -> Self {
        StreamKey {
            purpose,
            indices: [a, b, c],
        }
    }
}

/// Derives a fresh generator for `(seed, key)`.
pub fn stream(seed: u64, key: StreamKey<'_>) -> ChaCha8Rng {
    let mut s = splitmix(seed ^ fnv1a(key.purpose.as_bytes()));
    for &ix in &key.indices {
        s = splitmix(s ^ ix);
    }
    ChaCha8Rng::seed_from_u64(s)
}

/// Stream used for gate noise during training: one per (gate, step).
pub fn gate_noise(seed: u64, gate_id: u64, step: u64) -> ChaCha8Rng {
    stream(seed, StreamKey::with("gate-noise", gate_id, step, 0))
}

/// Stream used for parameter initialization, keyed by parameter name so
/// that networks sharing layer names initialize identically.
pub fn init_stream(seed: u64, param_name: &str) -> ChaCha8Rng {
    stream(
        seed,
        StreamKey::with("init", fnv1a(param_name.as_bytes()), 0, 0),
    )
}

/// Stream used to shuffle the training set, one per epoch.
pub fn shuffle_stream(seed: u64, epoch: u64) -> ChaCha8Rng {
    stream(seed, StreamKey::with("shuffle", epoch, 0, 0))
}

/// One standard-normal draw via Box-Muller (keeps the dependency
/// footprint to plain uniform generation).
pub fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    use rand::Rng;
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
