//! Deterministic seed derivation for independent sub-streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

// Stream tags keep differently-purposed children of one master seed apart.
pub(crate) const STREAM_KMEANS: u64 = 0x6b6d_6561_6e73;
pub(crate) const STREAM_SHUFFLE: u64 = 0x7368_7566_666c;
pub(crate) const STREAM_LANCZOS: u64 = 0x6c61_6e63_7a6f;
pub(crate) const STREAM_TRAIN: u64 = 0x7472_6169_6e00;
pub(crate) const STREAM_DROPOUT: u64 = 0x6472_6f70_6f75;
pub(crate) const STREAM_TAGS: u64 = 0x7461_6773_0000;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Child seed for task `index` of stream `stream` under `master`.
pub fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(master ^ splitmix64(stream)) ^ index)
}

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
