//! Deterministic stream derivation for all randomness in the toolkit.
//!
//! Every consumer of randomness derives its own independent stream from the
//! 64-bit config seed and a purpose string. The convention is:
//!
//! ```text
//! stream_key = SHA-256( seed.to_le_bytes() || purpose_utf8 )[0..32]
//! ```
//!
//! and the key seeds a counter-based ChaCha generator. Distinct purpose
//! strings therefore yield independent streams regardless of call order,
//! which makes pipelines splittable: a worker handling bootstrap subset `i`
//! derives `stream(seed, &format!("subset/{i}/attack"))` and never contends
//! with its siblings.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// The generator handed out to consumers. Counter-based, cheap to fork.
pub type Stream = ChaCha8Rng;

/// Derive the RNG stream identified by `purpose` from the master `seed`.
pub fn stream(seed: u64, purpose: &str) -> Stream {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(purpose.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}
