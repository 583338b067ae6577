//! Named random substreams.
//!
//! Every random draw in the pipeline comes from a [`ChaCha8Rng`] seeded by
//! mixing the run seed with a stream label and a list of indices, so that
//! parallel work items never share state and results do not depend on
//! scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(FNV_PRIME)
    })
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a 64-bit stream key from a seed, a label and indices.
pub fn stream_key(seed: u64, label: &str, indices: &[u64]) -> u64 {
    let mut h = splitmix(seed ^ fnv1a(label.as_bytes()));
    for &i in indices {
        h = splitmix(h ^ i.wrapping_mul(0xd6e8_feb8_6659_fd93));
    }
    h
}

/// A fresh generator for the named substream.
pub fn stream(seed: u64, label: &str, indices: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_key(seed, label, indices))
}

/// Stable 64-bit hash of a string identifier, for use as a stream index.
pub fn id_hash(id: &str) -> u64 {
    fnv1a(id.as_bytes())
}
