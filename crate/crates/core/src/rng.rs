//! Seed derivation for reproducible Monte Carlo batches.
//!
//! Every random stream is a ChaCha8 generator keyed by the master seed and
//! positioned on stream number `path * STREAMS_PER_PATH + kind`. Streams of
//! distinct `(path, kind)` pairs never overlap, so growing a batch never
//! perturbs the paths already drawn.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Number of stream kinds reserved per path.
pub const STREAMS_PER_PATH: u64 = 8;

/// The independent random elements drawn for one path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum StreamKind {
    PoissonTimes = 0,
    Marks = 1,
    Uniforms = 2,
    Brownian = 3,
    InitialState = 4,
}

/// Seed material identifying one path of one batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub master: u64,
    pub path: u64,
}

impl SeedRecord {
    pub fn new(master: u64, path: u64) -> Self {
        Self { master, path }
    }

    pub fn stream(&self, kind: StreamKind) -> ChaCha8Rng {
        substream(self.master, self.path, kind)
    }
}

/// Generator for stream `kind` of path `path` under master seed `master`.
pub fn substream(master: u64, path: u64, kind: StreamKind) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(
        path.wrapping_mul(STREAMS_PER_PATH)
            .wrapping_add(kind as u64),
    );
    rng
}
