//! Named sub-seeds derived from one user seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Derives an independent seed for the stream called `name`.
pub fn sub_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a over the name, then a splitmix64 finalizer over the mix.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix(seed ^ splitmix(h))
}

/// Sub-seed for an indexed stream, e.g. one per epoch or per class.
pub fn indexed_seed(seed: u64, name: &str, index: u64) -> u64 {
    splitmix(sub_seed(seed, name).wrapping_add(splitmix(index)))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_and_indices_separate_streams() {
        assert_ne!(sub_seed(7, "data"), sub_seed(7, "init"));
        assert_ne!(sub_seed(7, "data"), sub_seed(8, "data"));
        assert_eq!(sub_seed(7, "data"), sub_seed(7, "data"));
        assert_ne!(indexed_seed(7, "epoch", 0), indexed_seed(7, "epoch", 1));
    }
}
