//! Selection accuracy: fraction of instances whose argmax-scored option is
//! the ground truth, broken down by ruleset.

use std::collections::BTreeMap;

use anyhow::Result;
use autodiff::{Graph, ParamStore, Scalar};
use forge::PuzzleInstance;
use model::dio::DioModel;
use model::util::argmax;
use model::world::{noisy_option_scores, WorldModel};
use serde::Serialize;

pub enum ScorerRef<'a> {
    Dio(&'a DioModel),
    World(&'a WorldModel),
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct EvalReport {
    pub total: usize,
    pub hits: usize,
    pub accuracy: f64,
    pub by_ruleset: BTreeMap<String, (usize, usize)>,
}

impl EvalReport {
    pub fn breakdown_accuracy(&self, key: &str) -> Option<f64> {
        self.by_ruleset
            .get(key)
            .map(|&(h, t)| h as f64 / t.max(1) as f64)
    }
}

/// Score the 8 options of each instance and pick the argmax. World models
/// are evaluated on their noise-free features so repeated runs agree.
pub fn evaluate<T: Scalar>(
    scorer: &ScorerRef<'_>,
    store: &ParamStore<T>,
    instances: &[PuzzleInstance],
    max_instances: usize,
    batch: usize,
) -> Result<EvalReport> {
    let take = instances.len().min(max_instances);
    let mut hits = 0usize;
    let mut by_ruleset: BTreeMap<String, (usize, usize)> = BTreeMap::new();

    let mut i = 0;
    while i < take {
        let hi = (i + batch).min(take);
        let chunk = &instances[i..hi];
        let images: Vec<&[u8]> = chunk
            .iter()
            .flat_map(|inst| inst.images.iter().map(|v| v.as_slice()))
            .collect();
        let g = Graph::<T>::new();
        let scores = match scorer {
            ScorerRef::Dio(m) => {
                let z = m.features(&g, store, &images)?;
                m.score_options(&g, store, &z)?.scores
            }
            ScorerRef::World(m) => {
                let (u, _b) = m.dual_features(&g, store, &images)?;
                let mut unused = autodiff::seeded_rng(0, autodiff::Stream::Eval);
                noisy_option_scores(&g, store, m, &u, &mut unused, false)?.scores
            }
        };
        let values = scores.value_f64();
        for (row, inst) in chunk.iter().enumerate() {
            let s = &values[row * 8..(row + 1) * 8];
            let predicted = argmax(s);
            let correct = predicted == inst.answer as usize - 9;
            let entry = by_ruleset.entry(inst.ruleset_key()).or_insert((0, 0));
            entry.1 += 1;
            if correct {
                hits += 1;
                entry.0 += 1;
            }
        }
        i = hi;
    }

    Ok(EvalReport {
        total: take,
        hits,
        accuracy: hits as f64 / take.max(1) as f64,
        by_ruleset,
    })
}
