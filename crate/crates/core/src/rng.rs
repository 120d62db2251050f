//! Seeded random streams.
//!
//! Every consumer of randomness derives its generator from the root seed and
//! a fixed stream id, so adding a consumer never perturbs the others.

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

pub type Rng = Xoshiro256PlusPlus;

/// Fixed stream ids.
pub mod streams {
    pub const PARAM_INIT: u64 = 1;
    pub const PROTOTYPE_INIT: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const SYNTH_NORMAL: u64 = 16;
    pub const SYNTH_LESION: u64 = 17;
    pub const GRAD_CHECK: u64 = 32;
    pub const TESTS: u64 = 64;
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generator for `(seed, stream)`.
pub fn stream(seed: u64, stream: u64) -> Rng {
    Rng::seed_from_u64(splitmix(seed) ^ splitmix(stream.wrapping_mul(0xD6E8_FEB8_6659_FD93)))
}

/// Generator for one item of an indexed stream, e.g. sample `index` of the
/// synthetic generator.
pub fn indexed(seed: u64, stream_id: u64, index: u64) -> Rng {
    stream(seed ^ splitmix(index.wrapping_add(0x632B_E59B_D9B4_E019)), stream_id)
}
