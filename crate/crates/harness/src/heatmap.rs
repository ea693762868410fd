//! Pairwise-similarity diagnostic over pooled pattern representations:
//! cosine matrix as CSV + PNG, with intra-rule means for comparing models.

use std::path::Path;

use anyhow::{bail, Context, Result};
use autodiff::Graph;
use forge::PuzzleInstance;
use model::diego::{concat_pooled, intra_group_mean, pooled_patterns, similarity_matrix};
use serde::Serialize;

use crate::data::Dataset;
use crate::trainer::{load_run, LoadedRun};

#[derive(Debug, Clone, Serialize)]
pub struct HeatmapSummary {
    pub instances: usize,
    pub intra_rule_mean: f64,
    pub labels: Vec<String>,
}

/// Pooled per-instance representations under a run's model.
pub fn pooled_reps(run: &LoadedRun<f32>, instances: &[&PuzzleInstance]) -> Result<Vec<Vec<f64>>> {
    let Some(dio) = run.dio_model() else {
        bail!("similarity diagnostic needs a pattern-producing model");
    };
    let mut reps = Vec::with_capacity(instances.len());
    // one instance per graph keeps memory flat
    for inst in instances {
        let g = Graph::<f32>::new();
        let images: Vec<&[u8]> = inst.images.iter().map(|v| v.as_slice()).collect();
        let z = dio.features(&g, &run.store, &images)?;
        let out = dio.score_options(&g, &run.store, &z)?;
        let patterns =
            model::diego::gather_answer_patterns(&out.patterns, &[inst.answer as usize - 9])?;
        let shape = patterns.shape().to_vec(); // [1, N, K, 4, D]
        let pooled = pooled_patterns(&patterns.value_f64(), 1, shape[1], shape[2], shape[4]);
        reps.extend(concat_pooled(&pooled));
    }
    Ok(reps)
}

pub fn heatmap(
    run_dir: &Path,
    data_paths: &[std::path::PathBuf],
    n_instances: usize,
    out_prefix: &Path,
) -> Result<HeatmapSummary> {
    let mut instances: Vec<PuzzleInstance> = Vec::new();
    let mut raster = None;
    for p in data_paths {
        let ds = Dataset::load(p)?;
        if let Some(r) = raster {
            if r != ds.header.raster_size {
                bail!("datasets disagree on raster size");
            }
        }
        raster = Some(ds.header.raster_size);
        instances.extend(ds.instances);
    }
    let raster = raster.context("no datasets given")? as usize;
    instances.truncate(n_instances);
    if instances.is_empty() {
        bail!("no instances to compare");
    }

    let run: LoadedRun<f32> = load_run(run_dir, raster)?;
    let refs: Vec<&PuzzleInstance> = instances.iter().collect();
    let reps = pooled_reps(&run, &refs)?;
    let matrix = similarity_matrix(&reps);
    let labels: Vec<String> = refs.iter().map(|i| i.ruleset_key()).collect();
    let intra = intra_group_mean(&matrix, &labels);

    write_csv(&matrix, &labels, &out_prefix.with_extension("csv"))?;
    write_png(&matrix, &out_prefix.with_extension("png"))?;

    Ok(HeatmapSummary {
        instances: refs.len(),
        intra_rule_mean: intra,
        labels,
    })
}

fn write_csv(matrix: &[Vec<f64>], labels: &[String], path: &Path) -> Result<()> {
    use std::io::Write;
    let mut f = std::fs::File::create(path)?;
    write!(f, "label")?;
    for l in labels {
        write!(f, ",{l}")?;
    }
    writeln!(f)?;
    for (row, label) in matrix.iter().zip(labels) {
        write!(f, "{label}")?;
        for v in row {
            write!(f, ",{v:.6}")?;
        }
        writeln!(f)?;
    }
    Ok(())
}

fn write_png(matrix: &[Vec<f64>], path: &Path) -> Result<()> {
    let n = matrix.len() as u32;
    let scale = 8u32;
    let mut img = image::GrayImage::new(n * scale, n * scale);
    for (i, row) in matrix.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            // cosine in [-1, 1] -> luminance
            let lum = (((v + 1.0) / 2.0).clamp(0.0, 1.0) * 255.0) as u8;
            for dy in 0..scale {
                for dx in 0..scale {
                    img.put_pixel(j as u32 * scale + dx, i as u32 * scale + dy, image::Luma([lum]));
                }
            }
        }
    }
    img.save(path)?;
    Ok(())
}
