//! Answer generation (estimate -> sample -> decode) and its two-sided
//! evaluation: the symbolic rule oracle on nearest-template classifications,
//! and the progressive-pattern verifier.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use autodiff::{Graph, Stream};
use forge::{verify_panel, PuzzleInstance, TemplateBank};
use model::world::{component_token_scores, sample_and_decode};
use rand::Rng;
use serde::Serialize;

use crate::data::Dataset;
use crate::trainer::{load_run, LoadedRun, RunKind};

/// Classification threshold: mean squared pixel error above which a raster
/// matches no template and the oracle rejects outright.
pub const CLASSIFY_MSE_MAX: f64 = 0.05;

#[derive(Debug, Clone, Serialize)]
pub struct AnswerRecord {
    pub instance_seed: u64,
    pub draw: usize,
    pub component_indices: Vec<usize>,
    pub oracle_accept: bool,
    pub template_mse: f64,
    pub diego_accept: Option<bool>,
    pub predicted_labels: Option<[usize; 4]>,
}

#[derive(Debug, Clone, Serialize)]
pub struct GenEvalSummary {
    pub instances: usize,
    pub draws_per_instance: usize,
    pub oracle_accept_rate: f64,
    pub oracle_ci95: (f64, f64),
    pub noise_oracle_accept_rate: f64,
    pub diego_accept_rate: Option<f64>,
    pub diego_oracle_agreement: Option<f64>,
    pub noise_diego_reject_rate: Option<f64>,
}

fn ci95(p: f64, n: usize) -> (f64, f64) {
    if n == 0 {
        return (0.0, 0.0);
    }
    let half = 1.96 * (p * (1.0 - p) / n as f64).sqrt();
    ((p - half).max(0.0), (p + half).min(1.0))
}

pub struct GenEvalOptions {
    pub answers_per_instance: usize,
    pub max_instances: usize,
    pub write_answers: Option<PathBuf>,
    pub seed: u64,
}

/// Generate answers with a trained codebook run; verify with the symbolic
/// oracle and, when provided, a metadata-aligned run.
pub fn gen_eval(
    world_run: &Path,
    diego_run: Option<&Path>,
    data: &Path,
    opts: &GenEvalOptions,
) -> Result<GenEvalSummary> {
    let ds = Dataset::load(data)?;
    let raster = ds.header.raster_size as usize;
    let world: LoadedRun<f32> = load_run(world_run, raster)?;
    let RunKind::World(wmodel) = &world.kind else {
        bail!("{} is not a codebook-method run", world_run.display());
    };
    let diego: Option<LoadedRun<f32>> = match diego_run {
        Some(p) => Some(load_run(p, raster)?),
        None => None,
    };
    if let Some(d) = &diego {
        if !matches!(d.kind, RunKind::Diego(_)) {
            bail!("verifier run must be a metadata-aligned model");
        }
    }

    let bank = TemplateBank::new(ds.header.raster_size);
    let mut rng = autodiff::seeded_rng(opts.seed, Stream::Gumbel);
    let mut records: Vec<AnswerRecord> = Vec::new();
    let mut noise_oracle_accepts = 0usize;
    let mut noise_diego_rejects = 0usize;
    let mut noise_total = 0usize;

    let take = ds.instances.len().min(opts.max_instances);
    let n_tokens = world.model_config.tokens();
    for inst in ds.instances.iter().take(take) {
        // context-dependent component weights S[m, j] from z = u + b
        let g = Graph::<f32>::new();
        let images: Vec<&[u8]> = inst.images.iter().map(|v| v.as_slice()).collect();
        let (u, b) = wmodel.dual_features(&g, &world.store, &images)?;
        let z = u.add(&b)?;
        let ctx = z.slice_axis(1, 0, 8)?;
        let weights_t = component_token_scores(
            &g,
            &world.store,
            wmodel,
            &ctx,
            None,
            world.config.component_chunk,
        )?;
        let weights = weights_t.value_f64();
        debug_assert_eq!(weights.len(), wmodel.components * n_tokens);

        for draw in 0..opts.answers_per_instance {
            let gen_graph = Graph::<f32>::new();
            let answer =
                sample_and_decode(&gen_graph, &world.store, wmodel, &weights, &mut rng)?;
            let (panel, mse) = bank.classify(&answer.raster);
            let oracle_accept = mse <= CLASSIFY_MSE_MAX && verify_panel(inst, &panel);

            let (diego_accept, predicted_labels) = match &diego {
                Some(d) => {
                    let RunKind::Diego(dm) = &d.kind else { unreachable!() };
                    let g2 = Graph::<f32>::new();
                    let (ok, labels) =
                        dm.verify_generated(&g2, &d.store, inst, &answer.raster)?;
                    (Some(ok), Some(labels))
                }
                None => (None, None),
            };

            if let Some(dir) = &opts.write_answers {
                write_answer_png(dir, inst.seed, draw, &answer.raster, raster)?;
            }
            records.push(AnswerRecord {
                instance_seed: inst.seed,
                draw,
                component_indices: answer.component_indices,
                oracle_accept,
                template_mse: mse,
                diego_accept,
                predicted_labels,
            });

            // noise baseline: a uniform-noise raster through both verifiers
            let noise: Vec<u8> = (0..raster * raster).map(|_| rng.gen::<u8>()).collect();
            let (npanel, nmse) = bank.classify(&noise);
            if nmse <= CLASSIFY_MSE_MAX && verify_panel(inst, &npanel) {
                noise_oracle_accepts += 1;
            }
            if let Some(d) = &diego {
                let RunKind::Diego(dm) = &d.kind else { unreachable!() };
                let g3 = Graph::<f32>::new();
                let (ok, _) = dm.verify_generated(&g3, &d.store, inst, &noise)?;
                if !ok {
                    noise_diego_rejects += 1;
                }
            }
            noise_total += 1;
        }
    }

    if let Some(dir) = &opts.write_answers {
        write_manifest(dir, &records)?;
    }

    let n = records.len();
    let oracle_accept_rate =
        records.iter().filter(|r| r.oracle_accept).count() as f64 / n.max(1) as f64;
    let diego_rates = if diego.is_some() {
        let accepts = records
            .iter()
            .filter(|r| r.diego_accept == Some(true))
            .count() as f64;
        let agree = records
            .iter()
            .filter(|r| r.diego_accept == Some(r.oracle_accept))
            .count() as f64;
        Some((accepts / n.max(1) as f64, agree / n.max(1) as f64))
    } else {
        None
    };

    Ok(GenEvalSummary {
        instances: take,
        draws_per_instance: opts.answers_per_instance,
        oracle_accept_rate,
        oracle_ci95: ci95(oracle_accept_rate, n),
        noise_oracle_accept_rate: noise_oracle_accepts as f64 / noise_total.max(1) as f64,
        diego_accept_rate: diego_rates.map(|(a, _)| a),
        diego_oracle_agreement: diego_rates.map(|(_, g)| g),
        noise_diego_reject_rate: diego
            .is_some()
            .then(|| noise_diego_rejects as f64 / noise_total.max(1) as f64),
    })
}

/// `generate` verb: answers written as rasters plus a manifest, no scoring.
pub fn generate_answers(
    world_run: &Path,
    data: &Path,
    answers_per_instance: usize,
    max_instances: usize,
    out: &Path,
    seed: u64,
) -> Result<usize> {
    let ds = Dataset::load(data)?;
    let raster = ds.header.raster_size as usize;
    let world: LoadedRun<f32> = load_run(world_run, raster)?;
    let RunKind::World(wmodel) = &world.kind else {
        bail!("{} is not a codebook-method run", world_run.display());
    };
    std::fs::create_dir_all(out)?;
    let mut rng = autodiff::seeded_rng(seed, Stream::Gumbel);
    let mut manifest = Vec::new();
    let take = ds.instances.len().min(max_instances);
    for inst in ds.instances.iter().take(take) {
        let g = Graph::<f32>::new();
        let images: Vec<&[u8]> = inst.images.iter().map(|v| v.as_slice()).collect();
        let (u, b) = wmodel.dual_features(&g, &world.store, &images)?;
        let z = u.add(&b)?;
        let ctx = z.slice_axis(1, 0, 8)?;
        let weights = component_token_scores(
            &g,
            &world.store,
            wmodel,
            &ctx,
            None,
            world.config.component_chunk,
        )?
        .value_f64();
        for draw in 0..answers_per_instance {
            let g2 = Graph::<f32>::new();
            let answer = sample_and_decode(&g2, &world.store, wmodel, &weights, &mut rng)?;
            write_answer_png(out, inst.seed, draw, &answer.raster, raster)?;
            manifest.push(AnswerRecord {
                instance_seed: inst.seed,
                draw,
                component_indices: answer.component_indices,
                oracle_accept: false,
                template_mse: 0.0,
                diego_accept: None,
                predicted_labels: None,
            });
        }
    }
    write_manifest(out, &manifest)?;
    Ok(manifest.len())
}

fn write_answer_png(
    dir: &Path,
    instance_seed: u64,
    draw: usize,
    raster: &[u8],
    size: usize,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let img = image::GrayImage::from_raw(size as u32, size as u32, raster.to_vec())
        .context("raster buffer size mismatch")?;
    let path = dir.join(format!("answer_{instance_seed}_{draw}.png"));
    img.save(&path)?;
    Ok(())
}

fn write_manifest(dir: &Path, records: &[AnswerRecord]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut f = std::fs::File::create(dir.join("manifest.jsonl"))?;
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    Ok(())
}
