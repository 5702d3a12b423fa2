//! Deterministic randomness. A single seed fans out into independent named
//! streams (ChaCha8 is counter-based, so streams never overlap) so that e.g.
//! drawing more data batches never perturbs weight initialization.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamKind {
    /// Weight initialization.
    Init,
    /// Dataset sampling (template choice + pixel noise).
    Data,
    /// Label dropout decisions during training.
    Dropout,
    /// Diffusion-time draws, interpolation noise, sampler priors.
    Noise,
}

impl StreamKind {
    fn stream_id(self) -> u64 {
        match self {
            StreamKind::Init => 1,
            StreamKind::Data => 2,
            StreamKind::Dropout => 3,
            StreamKind::Noise => 4,
        }
    }
}

/// Factory for per-purpose RNG streams derived from one run seed.
#[derive(Debug, Clone)]
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

    pub fn stream(&self, kind: StreamKind) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(kind.stream_id());
        rng
    }
}
