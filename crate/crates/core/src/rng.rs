//! Named random substreams derived from one seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fnv1a(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Independent generator for `name`; draws from one stream never shift
/// another stream's sequence.
pub fn substream(seed: u64, name: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(name));
    rng
}

/// Generator for a numbered item inside a named stream, e.g. the dropout
/// masks of one sample in one batch.
pub fn indexed(seed: u64, name: &str, index: &[u64]) -> ChaCha8Rng {
    let mut key = fnv1a(name) ^ seed.rotate_left(17);
    for &i in index {
        key = (key ^ i).wrapping_mul(0x0100_0000_01b3).rotate_left(29);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(fnv1a(name));
    rng
}
