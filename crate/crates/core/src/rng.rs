//! Splittable, path-addressed random streams.
//!
//! A [`RandomStream`] is a value: a root seed plus a path of child indices.
//! The generator behind a stream is a ChaCha8 instance keyed by a SHA-256
//! digest of `(seed, path)`, so any stream can be reconstructed from its
//! address alone, independent of which thread or in what order it was
//! derived.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Generator type handed out by [`RandomStream::rng`].
pub type StreamRng = ChaCha8Rng;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RandomStream {
    seed: u64,
    path: Vec<u64>,
}

impl RandomStream {
    pub fn root(seed: u64) -> Self {
        Self {
            seed,
            path: Vec::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn path(&self) -> &[u64] {
        &self.path
    }

    /// Child stream at `index`. Deterministic: the same parent and index
    /// always give the same child.
    pub fn derive(&self, index: u64) -> Self {
        let mut path = Vec::with_capacity(self.path.len() + 1);
        path.extend_from_slice(&self.path);
        path.push(index);
        Self {
            seed: self.seed,
            path,
        }
    }

    /// Shorthand for a chain of derivations.
    pub fn derive_path(&self, indices: &[u64]) -> Self {
        let mut path = self.path.clone();
        path.extend_from_slice(indices);
        Self {
            seed: self.seed,
            path,
        }
    }

    fn key(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        hasher.update(b"gginv-stream-v1");
        hasher.update(self.seed.to_le_bytes());
        hasher.update((self.path.len() as u64).to_le_bytes());
        for idx in &self.path {
            hasher.update(idx.to_le_bytes());
        }
        hasher.finalize().into()
    }

    /// Fresh generator positioned at the start of this stream.
    pub fn rng(&self) -> StreamRng {
        ChaCha8Rng::from_seed(self.key())
    }
}

impl fmt::Display for RandomStream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.seed)?;
        for idx in &self.path {
            write!(f, "/{idx}")?;
        }
        Ok(())
    }
}
