//! Seed derivation. Every random choice in the crate draws from a ChaCha
//! stream derived from the scenario seed, so runs never touch OS entropy.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// Independent generator families. Keeping them apart means, for example,
/// that key establishment traffic never perturbs the server's routing draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Topology = 1,
    KeyBank = 2,
    Provision = 3,
    SessionKeys = 4,
    Routing = 5,
    Masks = 6,
    Values = 7,
    Trials = 8,
}

/// Generator for `(seed, stream, index)`. Distinct triples give independent
/// streams; the same triple always gives the same sequence.
pub fn derive(seed: u64, stream: Stream, index: u64) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stream as u64) << 56) ^ index);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn derivation_is_reproducible_and_separated() {
        let a = derive(7, Stream::Routing, 3).next_u64();
        assert_eq!(a, derive(7, Stream::Routing, 3).next_u64());
        assert_ne!(a, derive(7, Stream::Routing, 4).next_u64());
        assert_ne!(a, derive(7, Stream::Masks, 3).next_u64());
        assert_ne!(a, derive(8, Stream::Routing, 3).next_u64());
    }
}
