//! Named, independent random streams derived from one master seed.
//!
//! Every consumer of randomness asks for its own stream by name and index
//! path, so adding draws in one place never shifts the draws seen elsewhere,
//! and a resumed run can rebuild exactly the stream it would have been using.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Deterministic generator for `(master, name, indices)`.
pub fn stream(master: u64, name: &str, indices: &[u64]) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update((name.len() as u64).to_le_bytes());
    hasher.update(name.as_bytes());
    for i in indices {
        hasher.update(i.to_le_bytes());
    }
    ChaCha8Rng::from_seed(hasher.finalize().into())
}
