//! Training orchestration: optimizers, per-step RNG derivation, the
//! degradation sampler shared by both stages, and the stage runners.

pub mod ae;
pub mod opt;
pub mod stage1;
pub mod stage2;

pub use ae::run_autoencoder;
pub use opt::{OptConfig, OptKind, Optimizer};
pub use stage1::run_stage1;
pub use stage2::{run_stage2, SodiffCkptConfig};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

/// Derive a ChaCha20 generator from (seed, step, purpose). Each step's
/// randomness depends only on these three values, never on how many draws
/// earlier steps made, so a resumed run replays bitwise.
pub fn step_rng(seed: u64, step: u64, purpose: &str) -> ChaCha20Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(step.to_le_bytes());
    h.update(purpose.as_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha20Rng::from_seed(key)
}
