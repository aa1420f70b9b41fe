// SPDX-License-Identifier: MIT OR Apache-2.0

//! Named random sub-streams.
//!
//! Every random draw in the engine comes from a [`ChaCha8Rng`] whose 256-bit
//! seed is `SHA-256(root_seed_le || name)`. Two streams with different names
//! never share state, so adding a draw to one experiment cannot shift the
//! numbers seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Deterministic generator for the stream `name` under `seed`.
pub fn stream(seed: u64, name: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(name.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}
