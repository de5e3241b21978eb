//! Named, seeded random substreams.
//!
//! Every random draw in the pipeline comes from a stream derived from the
//! root seed, a stream name and a list of indices (epoch, step, sample...).
//! Streams are independent of evaluation order, which keeps parallel and
//! sequential runs identical.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

pub fn substream(root: u64, name: &str, indices: &[u64]) -> StreamRng {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update((name.len() as u64).to_le_bytes());
    h.update(name.as_bytes());
    for i in indices {
        h.update(i.to_le_bytes());
    }
    let digest = h.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest[..32]);
    ChaCha8Rng::from_seed(seed)
}
