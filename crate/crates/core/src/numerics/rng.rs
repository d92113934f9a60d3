use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Independent named random streams derived from one run seed.
///
/// Each stochastic site (initialization, data order, condition dropout,
/// sampling, ...) asks for its own stream, so changing how many draws one site
/// makes never shifts the draws of another.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngStreams {
    seed: u64,
}

impl RngStreams {
    pub fn new(seed: u64) -> Self {
        RngStreams { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self, name: &str) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(name.as_bytes());
        let digest: [u8; 32] = h.finalize().into();
        ChaCha8Rng::from_seed(digest)
    }

    /// Stream positioned at a saved word offset, for exact resumption.
    pub fn stream_at(&self, name: &str, word_pos: u128) -> ChaCha8Rng {
        let mut r = self.stream(name);
        r.set_word_pos(word_pos);
        r
    }
}
