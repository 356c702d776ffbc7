//! Deterministic random streams.
//!
//! Every (seed, client, iteration) triple owns a disjoint ChaCha8 stream:
//! the seed and client id form the key, the iteration index selects the
//! stream. Draws therefore never depend on the order in which clients or
//! iterations are executed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const STREAM_DOMAIN: u64 = 0x6470_666c_5f73_7464; // "dpfl_std"

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RngStream {
    pub seed: u64,
    pub client: u64,
    pub iteration: u64,
}

impl RngStream {
    pub fn new(seed: u64, client: u64, iteration: u64) -> Self {
        Self {
            seed,
            client,
            iteration,
        }
    }

    /// Same seed and client, another iteration.
    pub fn at_iteration(self, iteration: u64) -> Self {
        Self { iteration, ..self }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&self.seed.to_le_bytes());
        key[8..16].copy_from_slice(&self.client.to_le_bytes());
        key[16..24].copy_from_slice(&STREAM_DOMAIN.to_le_bytes());
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(self.iteration);
        rng
    }
}

/// Independent generator for one named purpose (data synthesis, model
/// initialization, splitting) derived from a single seed.
pub fn purpose_rng(seed: u64, purpose: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[24..32].copy_from_slice(&purpose.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}
