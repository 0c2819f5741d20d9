//! Named random streams derived from one root seed.
//!
//! Each consumer asks for its own labelled stream, so adding a consumer never
//! shifts the numbers another one sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Generator for the stream `label` under `seed`.
pub fn stream(seed: u64, label: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(label.as_bytes()));
    rng
}

/// Child seed for handing a whole subtree of streams to another component.
pub fn child_seed(seed: u64, label: &str) -> u64 {
    use rand::RngCore;
    stream(seed, label).next_u64()
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}
