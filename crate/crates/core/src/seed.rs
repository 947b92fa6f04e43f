use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic RNG for `seed` and a stream path such as `[round, client]`.
pub(crate) fn stream_rng(seed: u64, stream: &[u64]) -> ChaCha8Rng {
    let mut s = splitmix64(seed);
    for &tag in stream {
        s = splitmix64(s ^ splitmix64(tag.wrapping_add(0x5851_F42D_4C95_7F2D)));
    }
    ChaCha8Rng::seed_from_u64(s)
}

/// Stream tags, kept distinct so components never share random draws.
pub(crate) mod tags {
    pub const MODEL: u64 = 1;
    pub const PROMPT: u64 = 2;
    pub const TRAIN_DATA: u64 = 3;
    pub const TEST_DATA: u64 = 4;
    pub const PARTITION: u64 = 5;
    pub const SELECTION: u64 = 6;
    pub const CLIENT: u64 = 7;
}
