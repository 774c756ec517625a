//! Seed derivation for independent, schedule-free random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type LabRng = ChaCha8Rng;

/// Stream purposes; distinct tags keep derived streams disjoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Task = 1,
    Init = 2,
    Prompts = 3,
    Student = 4,
    Teacher = 5,
    External = 6,
    Instance = 7,
    Rate = 8,
    Diagnostic = 9,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a base seed with a purpose tag and an index path into a new 64-bit seed.
pub fn derive_seed(base: u64, stream: Stream, path: &[u64]) -> u64 {
    let mut h = splitmix64(base ^ splitmix64(stream as u64));
    for &p in path {
        h = splitmix64(h ^ p.wrapping_mul(0xd6e8_feb8_6659_fd93));
    }
    h
}

pub fn stream_rng(base: u64, stream: Stream, path: &[u64]) -> LabRng {
    LabRng::seed_from_u64(derive_seed(base, stream, path))
}
