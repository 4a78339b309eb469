use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent random streams derived from one seed.
#[derive(Debug, Clone, Copy)]
#[repr(u64)]
pub(crate) enum Stream {
    Init = 1,
    Shuffle = 2,
    RandomAcquisition = 3,
    Split = 4,
    Generator = 5,
    Oracle = 6,
}

/// RNG for `(seed, stream, index)`. The same triple always yields the same
/// sequence, which is what makes runs resumable without persisting RNG state.
pub(crate) fn rng(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stream as u64) << 56) ^ index);
    rng
}
