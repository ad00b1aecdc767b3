//! Named, independently seeded random streams.
//!
//! Every stochastic source (arrivals, failures, topology churn, policy
//! sampling, parameter init) draws from its own stream so that two policies
//! run on the same seed see identical arrival traces.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

pub const ARRIVALS: &str = "arrivals";
pub const FAILURES: &str = "failures";
pub const TOPOLOGY: &str = "topology";
pub const POLICY: &str = "policy";
pub const INIT: &str = "init";

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable 64-bit key for `(seed, name)`.
pub fn stream_key(seed: u64, name: &str) -> u64 {
    // FNV-1a over the name, then mixed with the seed
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    splitmix64(h ^ splitmix64(seed))
}

pub fn stream(seed: u64, name: &str) -> StreamRng {
    StreamRng::seed_from_u64(stream_key(seed, name))
}
