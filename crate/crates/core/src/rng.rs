//! Seeded generators. Every random stream in the toolkit is a
//! xoshiro256** instance derived from a master seed and a purpose tag, so
//! independent consumers never share state.

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256StarStar;

pub type Rng = Xoshiro256StarStar;

/// Purpose tags for derived streams.
pub mod tag {
    pub const SPLIT: u64 = 0x5350_4c49;
    pub const INIT: u64 = 0x494e_4954;
    pub const SHUFFLE: u64 = 0x5348_5546;
    pub const SIGNATURE: u64 = 0x5349_474e;
    pub const LAYOUT: u64 = 0x4c41_594f;
    pub const NOISE: u64 = 0x4e4f_4953;
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Generator for `(seed, tag, index)`.
pub fn stream(seed: u64, tag: u64, index: u64) -> Rng {
    let mixed = splitmix(splitmix(seed ^ splitmix(tag)) ^ index);
    Rng::seed_from_u64(mixed)
}
