use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix an ordered tuple of integers into one seed. Used to give every
/// (run, epoch, sample) its own stream independent of processing order.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5D4E_1F0C_A3B2_9687, |acc, &p| {
        splitmix64(acc ^ splitmix64(p))
    })
}

pub fn rng_for(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(parts))
}

/// Stream tags so different consumers of the same (seed, epoch, index)
/// never share random numbers.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const AUGMENT: u64 = 3;
    pub const MASK: u64 = 4;
    pub const SYNTH: u64 = 5;
    pub const SPLIT: u64 = 6;
    pub const RECON: u64 = 7;
}
