//! Instance generation: value grids per active rule, distractor synthesis,
//! option shuffling, rendering.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::render::render_panel;
use crate::rules::{generate_grid, Attribute, PanelAttrs, RuleSpec, ATTRIBUTES};
use crate::{ForgeError, PuzzleInstance, Result};

/// How distractor panels are derived from the correct answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistractorStyle {
    /// Each distractor mutates the answer in 1-2 active attributes.
    Raven,
    /// Hierarchical: distractors derive from previously generated options,
    /// one attribute at a time, so no single attribute gives the answer away.
    IRaven,
}

#[derive(Debug, Clone)]
pub struct ForgeConfig {
    pub rules: Vec<RuleSpec>,
    pub raster_size: u16,
    pub distractors: DistractorStyle,
}

impl Default for ForgeConfig {
    fn default() -> Self {
        ForgeConfig {
            rules: vec![],
            raster_size: 32,
            distractors: DistractorStyle::Raven,
        }
    }
}

// RNG stream id for instance synthesis; keep distinct from model streams.
const FORGE_STREAM: u64 = 5;

/// Deterministically generate one instance for (seed, config).
pub fn generate(seed: u64, config: &ForgeConfig) -> Result<PuzzleInstance> {
    if config.rules.is_empty() {
        return Err(ForgeError::InvalidConfig("ruleset names no attribute".into()));
    }
    let mut seen = std::collections::HashSet::new();
    for spec in &config.rules {
        if !seen.insert(spec.attribute) {
            return Err(ForgeError::InvalidConfig(format!(
                "attribute {:?} has more than one rule",
                spec.attribute
            )));
        }
    }
    if config.raster_size % 8 != 0 || config.raster_size == 0 {
        return Err(ForgeError::InvalidConfig(format!(
            "raster size {} not a positive multiple of 8",
            config.raster_size
        )));
    }
    let mut rules = config.rules.clone();
    rules.sort_by_key(|r| r.attribute);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(FORGE_STREAM);

    // Matrix values: one grid per active attribute, one fixed draw per
    // inactive attribute (shared by every panel, so distractors never win
    // or lose on an unconstrained attribute).
    let mut grid = [PanelAttrs::default(); 9];
    for &attr in &ATTRIBUTES {
        if let Some(spec) = rules.iter().find(|r| r.attribute == attr) {
            let values = generate_grid(spec, &mut rng)?;
            for (cell, &v) in grid.iter_mut().zip(values.iter()) {
                cell.set(attr, v);
            }
        } else {
            let (lo, hi) = attr.domain();
            let v = rng.gen_range(lo..=hi);
            for cell in grid.iter_mut() {
                cell.set(attr, v);
            }
        }
    }

    let answer_panel = grid[8];
    let distractors = match config.distractors {
        DistractorStyle::Raven => raven_distractors(answer_panel, &rules, &mut rng),
        DistractorStyle::IRaven => iraven_distractors(answer_panel, &rules, &mut rng),
    };

    // Place the answer at a uniform slot in the option pool.
    let slot = rng.gen_range(0..8usize);
    let mut options = Vec::with_capacity(8);
    let mut d = distractors.into_iter();
    for i in 0..8 {
        if i == slot {
            options.push(answer_panel);
        } else {
            options.push(d.next().unwrap());
        }
    }

    let mut panels = Vec::with_capacity(16);
    panels.extend_from_slice(&grid[..8]);
    panels.extend_from_slice(&options);
    let images = panels
        .iter()
        .map(|p| render_panel(p, config.raster_size))
        .collect();

    Ok(PuzzleInstance {
        seed,
        raster_size: config.raster_size,
        panels,
        images,
        answer: 9 + slot as u8,
        metadata: rules,
    })
}

fn mutate_attr(panel: &mut PanelAttrs, attr: Attribute, rng: &mut ChaCha8Rng) {
    let (lo, hi) = attr.domain();
    let old = panel.get(attr);
    loop {
        let v = rng.gen_range(lo..=hi);
        if v != old {
            panel.set(attr, v);
            return;
        }
    }
}

/// Every mutated panel differs from the answer in at least one active
/// attribute, so it violates that attribute's rule (the completing value is
/// unique per rule). Distinctness is best-effort: tiny option spaces (for
/// example a single 3-level attribute) may repeat panels.
fn raven_distractors(
    answer: PanelAttrs,
    rules: &[RuleSpec],
    rng: &mut ChaCha8Rng,
) -> Vec<PanelAttrs> {
    let active: Vec<Attribute> = rules.iter().map(|r| r.attribute).collect();
    let mut out: Vec<PanelAttrs> = Vec::with_capacity(7);
    let space: usize = active.iter().map(|a| a.domain_size()).product::<usize>() - 1;
    for _ in 0..7 {
        for attempt in 0..64 {
            let mut cand = answer;
            let n_mut = if active.len() >= 2 && rng.gen_bool(0.5) { 2 } else { 1 };
            let mut attrs = active.clone();
            attrs.shuffle(rng);
            for &a in attrs.iter().take(n_mut) {
                mutate_attr(&mut cand, a, rng);
            }
            let fresh = !out.contains(&cand);
            if fresh || attempt == 63 || out.len() >= space {
                out.push(cand);
                break;
            }
        }
    }
    out
}

fn iraven_distractors(
    answer: PanelAttrs,
    rules: &[RuleSpec],
    rng: &mut ChaCha8Rng,
) -> Vec<PanelAttrs> {
    let active: Vec<Attribute> = rules.iter().map(|r| r.attribute).collect();
    let mut pool = vec![answer];
    let mut attempts = 0;
    while pool.len() < 8 && attempts < 1024 {
        attempts += 1;
        let parent = pool[(pool.len() - 1) / 2];
        let mut cand = parent;
        let attr = active[rng.gen_range(0..active.len())];
        mutate_attr(&mut cand, attr, rng);
        let differs = active.iter().any(|&a| cand.get(a) != answer.get(a));
        if differs && !pool.contains(&cand) {
            pool.push(cand);
        }
    }
    // Exhausted spaces fall back to repeated mutations of the answer.
    while pool.len() < 8 {
        let mut cand = answer;
        mutate_attr(&mut cand, active[rng.gen_range(0..active.len())], rng);
        pool.push(cand);
    }
    pool.remove(0);
    pool
}
