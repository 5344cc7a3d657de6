//! Named, independently seeded random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Generation,
    Augmentation,
    Mixup,
    Init,
    Shuffle,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Generation => 1,
            Stream::Augmentation => 2,
            Stream::Mixup => 3,
            Stream::Init => 4,
            Stream::Shuffle => 5,
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream(seed: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which.id());
    rng
}

/// Sub-stream keyed by two counters (e.g. epoch and instance), so per-item
/// draws do not depend on evaluation order.
pub fn substream(seed: u64, which: Stream, a: u64, b: u64) -> ChaCha8Rng {
    let key = splitmix(splitmix(splitmix(seed) ^ a) ^ b.wrapping_mul(0xA24B_AED4_963E_E407));
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(which.id());
    rng
}
