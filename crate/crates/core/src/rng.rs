//! Seeded random streams.
//!
//! All randomness derives from a single root seed. The generator is ChaCha20 in
//! counter mode (`rand_chacha::ChaCha20Rng`); the 64-bit key comes from
//! `SeedableRng::seed_from_u64(root)` and independent streams are selected with the
//! ChaCha stream id, `(kind << 48) | index`. Streams never share keystream, so drawing
//! more from one (say a bigger Hutchinson budget) leaves the others untouched.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

pub type Rng = ChaCha20Rng;

/// Named substreams of a root seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    /// Weight initialization.
    Init = 1,
    /// Dataset synthesis and train/test split.
    Data = 2,
    /// Per-epoch minibatch shuffles (indexed by epoch).
    Shuffle = 3,
    /// Hutchinson probes (indexed by sample).
    Hutchinson = 4,
    /// Power-iteration starting vector.
    Power = 5,
}

pub fn stream(seed: u64, kind: Stream) -> Rng {
    substream(seed, kind, 0)
}

pub fn substream(seed: u64, kind: Stream, index: u64) -> Rng {
    assert!(index < (1 << 48), "substream index out of range");
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(((kind as u64) << 48) | index);
    rng
}
