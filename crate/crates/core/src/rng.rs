//! Named random sub-streams derived from a run seed.
//!
//! Every stochastic choice draws from a stream keyed by `(seed, stream, a, b)`,
//! so toggling one feature never shifts the draws of another and any step can
//! be replayed in isolation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Split = 2,
    LabeledBatch = 3,
    UnlabeledOrder = 4,
    WeakLabeled = 5,
    WeakUnlabeled = 6,
    Intensity = 7,
    Cutmix = 8,
    Generation = 9,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn substream(seed: u64, stream: Stream, a: u64, b: u64) -> ChaCha8Rng {
    let mut h = splitmix(seed);
    for v in [stream as u64, a, b] {
        h = splitmix(h ^ v);
    }
    ChaCha8Rng::seed_from_u64(h)
}
