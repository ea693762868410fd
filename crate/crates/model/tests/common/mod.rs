//! Shared fixtures for the model oracle tests: a tiny 64-bit configuration
//! (16x16 rasters, 8x8 patches -> 4 tokens, width 8) and toy instances.

#![allow(dead_code)]

use autodiff::ParamStore;
use forge::{DistractorStyle, ForgeConfig, PuzzleInstance, RuleSpec};
use model::config::ModelConfig;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn tiny_cfg() -> ModelConfig {
    ModelConfig {
        raster_size: 16,
        patch: 8,
        dim: 8,
        heads: 2,
        vit_depth: 1,
        ppim_depth: 1,
        pcem_depth: 1,
        ff_mult: 2,
        ppim_pos_enc: true,
        masked_ppim: false,
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn toy_instances(n: usize) -> Vec<PuzzleInstance> {
    let config = ForgeConfig {
        rules: RuleSpec::parse_list("count:ap,shade:d3").unwrap(),
        raster_size: 16,
        distractors: DistractorStyle::Raven,
    };
    (0..n as u64)
        .map(|s| forge::generate(s, &config).unwrap())
        .collect()
}

pub fn images_of<'a>(instances: &'a [PuzzleInstance]) -> Vec<&'a [u8]> {
    instances
        .iter()
        .flat_map(|i| i.images.iter().map(|v| v.as_slice()))
        .collect()
}

pub fn answers_of(instances: &[PuzzleInstance]) -> Vec<usize> {
    instances.iter().map(|i| i.answer as usize - 9).collect()
}

/// Give the zero-initialized scoring head small random weights so gradient
/// checks exercise the whole network.
pub fn randomize_head(store: &mut ParamStore<f64>, name: &str) {
    use rand::Rng;
    let mut r = rng(999);
    if let Some(id) = store.find(name) {
        let n = store.get(id).data.len();
        let data: Vec<f64> = (0..n).map(|_| r.gen_range(-0.3..0.3)).collect();
        store.set_data(id, data).unwrap();
    }
}
