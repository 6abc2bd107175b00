//! Counter-based seed expansion.
//!
//! Every random stream in the crate is derived from a single user seed plus a
//! component tag and an index, so results do not depend on scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Stream tags. Distinct tags never share a stream for the same seed.
pub mod tag {
    pub const KERNEL: u64 = 0x6b65_726e;
    pub const SEQUENCE: u64 = 0x7365_7175;
    pub const INIT: u64 = 0x696e_6974;
    pub const TRAIN: u64 = 0x7472_6e00;
    pub const EVAL: u64 = 0x6576_616c;
    pub const GRADCHECK: u64 = 0x6763_686b;
    pub const MISC: u64 = 0x6d69_7363;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Hash `(seed, tag, index)` into a 64-bit stream key.
pub fn derive(seed: u64, tag: u64, index: u64) -> u64 {
    let a = splitmix64(seed);
    let b = splitmix64(a ^ tag.rotate_left(17));
    splitmix64(b ^ index.wrapping_mul(0xd6e8_feb8_6659_fd93))
}

pub fn stream(seed: u64, tag: u64, index: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive(seed, tag, index))
}

/// Hash an arbitrary byte string (e.g. a tensor shape signature) into a u64.
pub fn hash_bytes(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325_u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}
