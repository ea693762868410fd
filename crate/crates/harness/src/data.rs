//! Dataset loading, digesting, and deterministic batch order.

use std::path::Path;

use anyhow::{Context, Result};
use forge::{DatasetHeader, PuzzleInstance};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub struct Dataset {
    pub header: DatasetHeader,
    pub instances: Vec<PuzzleInstance>,
    pub digest: String,
}

impl Dataset {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .with_context(|| format!("reading dataset {}", path.display()))?;
        let digest = hex_digest(&bytes);
        let (header, instances) =
            forge::read_dataset(path).with_context(|| format!("parsing {}", path.display()))?;
        Ok(Dataset {
            header,
            instances,
            digest,
        })
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let out = hasher.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

/// Epoch-shuffled index stream; each epoch reshuffles with the order rng.
pub struct BatchStream {
    order: Vec<usize>,
    cursor: usize,
    pub epoch: u64,
}

impl BatchStream {
    pub fn new(n: usize) -> Self {
        BatchStream {
            order: (0..n).collect(),
            cursor: n, // trigger a shuffle on first use
            epoch: 0,
        }
    }

    /// Next batch of indices; `true` in the second slot when a new epoch
    /// started (the previous one was exhausted).
    pub fn next_batch(&mut self, batch: usize, rng: &mut ChaCha8Rng) -> (Vec<usize>, bool) {
        let mut fresh_epoch = false;
        let mut out = Vec::with_capacity(batch);
        while out.len() < batch {
            if self.cursor >= self.order.len() {
                self.order.shuffle(rng);
                self.cursor = 0;
                self.epoch += 1;
                fresh_epoch = true;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        (out, fresh_epoch)
    }
}
