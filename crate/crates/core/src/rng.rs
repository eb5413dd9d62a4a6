//! Deterministic seeded randomness.
//!
//! All stochastic code in this crate draws from counter-based ChaCha streams:
//! a `(seed, stream)` pair fully determines the byte sequence, so work items
//! can be fanned out across threads and still reproduce bit-for-bit. Stream
//! ids are namespaced per purpose to keep independent consumers decorrelated.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream namespaces. Each (namespace, index) pair maps to a distinct
/// ChaCha stream under the same root seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Init,
    Scene,
    Shuffle,
    Augment,
    Transform,
    Crop,
    Eval,
    Material,
}

impl Domain {
    fn tag(self) -> u64 {
        match self {
            Domain::Init => 1,
            Domain::Scene => 2,
            Domain::Shuffle => 3,
            Domain::Augment => 4,
            Domain::Transform => 5,
            Domain::Crop => 6,
            Domain::Eval => 7,
            Domain::Material => 8,
        }
    }
}

/// A deterministic RNG for `(seed, domain, index)`.
///
/// The 64-bit stream id is `tag << 56 | index`, so up to 2^56 items per
/// domain stay collision-free.
pub fn stream(seed: u64, domain: Domain, index: u64) -> ChaCha8Rng {
    debug_assert!(index < (1 << 56));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((domain.tag() << 56) | index);
    rng
}

/// Derive a child seed from `(seed, index)` (splitmix64 finalizer). Used to
/// give each scene in a set its own root seed.
pub fn derive(seed: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(index.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
