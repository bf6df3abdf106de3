use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Independent random stream for one `(seed, sample, frame offset, purpose)` key.
pub fn stream(seed: u64, index: u64, frame_offset: i64, tag: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(b"lanenum-stream");
    hasher.update(seed.to_le_bytes());
    hasher.update(index.to_le_bytes());
    hasher.update(frame_offset.to_le_bytes());
    hasher.update((tag.len() as u64).to_le_bytes());
    hasher.update(tag.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}
