//! Model hyperparameters shared by every method.

use crate::{ModelError, Result};

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub raster_size: usize,
    /// Patch side length; raster must divide evenly.
    pub patch: usize,
    /// Embedding width D.
    pub dim: usize,
    pub heads: usize,
    pub vit_depth: usize,
    pub ppim_depth: usize,
    pub pcem_depth: usize,
    /// Feedforward hidden width = ff_mult * dim.
    pub ff_mult: usize,
    /// Test switch: positional encoding on the pattern-induction encoder.
    pub ppim_pos_enc: bool,
    /// Ablation: feed all six row/column features without pair selection
    /// (the selection axis collapses to 1).
    pub masked_ppim: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            raster_size: 32,
            patch: 8,
            dim: 32,
            heads: 4,
            vit_depth: 2,
            ppim_depth: 2,
            pcem_depth: 2,
            ff_mult: 2,
            ppim_pos_enc: true,
            masked_ppim: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.raster_size == 0 || self.patch == 0 || self.raster_size % self.patch != 0 {
            return Err(ModelError::Config(format!(
                "raster {} not divisible by patch {}",
                self.raster_size, self.patch
            )));
        }
        if self.dim % self.heads != 0 {
            return Err(ModelError::Config(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    /// Token count N per image.
    pub fn tokens(&self) -> usize {
        let g = self.raster_size / self.patch;
        g * g
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch
    }

    /// Row/column pair selections: C(3,2) * C(3,2), or 1 when masked.
    pub fn k_selections(&self) -> usize {
        if self.masked_ppim {
            1
        } else {
            9
        }
    }

    pub fn ff_hidden(&self) -> usize {
        self.ff_mult * self.dim
    }
}
