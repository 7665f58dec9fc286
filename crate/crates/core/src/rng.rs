//! Seeded random streams.
//!
//! Every random draw in the simulator comes from an [`RngStream`] keyed by a
//! root seed and a `(round, role, index)` triple. Streams are derived by
//! hashing the key, so adding a client or a group never shifts the draws of
//! any other participant.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Which participant (or harness component) owns a stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Client,
    Mixer,
    Server,
    Scheduler,
    Data,
    Attack,
    Oracle,
}

impl Role {
    fn tag(self) -> u8 {
        match self {
            Role::Client => 1,
            Role::Mixer => 2,
            Role::Server => 3,
            Role::Scheduler => 4,
            Role::Data => 5,
            Role::Attack => 6,
            Role::Oracle => 7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StreamId {
    pub round: u64,
    pub role: Role,
    pub index: u64,
}

impl StreamId {
    pub fn new(round: u64, role: Role, index: u64) -> Self {
        Self { round, role, index }
    }
}

/// A deterministic random stream: identical `(seed, id)` pairs produce
/// identical draw sequences.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    id: StreamId,
    inner: ChaCha20Rng,
}

impl RngStream {
    pub fn new(seed: u64, id: StreamId) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(b"cutmixsl-stream-v1");
        hasher.update(seed.to_le_bytes());
        hasher.update(id.round.to_le_bytes());
        hasher.update([id.role.tag()]);
        hasher.update(id.index.to_le_bytes());
        let digest = hasher.finalize();
        let mut key = [0u8; 32];
        key.copy_from_slice(&digest[..32]);
        Self {
            seed,
            id,
            inner: ChaCha20Rng::from_seed(key),
        }
    }

    /// Shorthand for `RngStream::new(seed, StreamId::new(round, role, index))`.
    pub fn keyed(seed: u64, round: u64, role: Role, index: u64) -> Self {
        Self::new(seed, StreamId::new(round, role, index))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn id(&self) -> StreamId {
        self.id
    }

    /// Derive an independent child stream; used when one logical participant
    /// needs several uncorrelated sub-streams (e.g. one per trial).
    pub fn child(&self, index: u64) -> RngStream {
        let mixed = self
            .id
            .index
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(index.wrapping_add(1));
        RngStream::new(
            self.seed ^ 0xA076_1D64_78BD_642F,
            StreamId::new(self.id.round ^ mixed, self.id.role, index),
        )
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}
