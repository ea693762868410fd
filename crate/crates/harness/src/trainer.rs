//! Training schedules for the four configurations, plus run loading.
//!
//! All methods share the step skeleton: build a fresh graph, forward,
//! backward, drop the graph, apply the optimizer. Deviations:
//!   - brando: starts from a pretrained checkpoint, alternates freezing
//!     everything downstream of feature extraction, and carries the memory
//!     bank across batches;
//!   - world: codebook losses + selection loss, with the component-weighted
//!     loss joining after the phase boundary on a smaller sub-batch;
//!   - diego: selection loss plus metadata alignment from scratch.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use autodiff::{save_checkpoint, Adam, AdamConfig, Graph, ParamStore, Scalar, Stream};
use forge::PuzzleInstance;
use model::brando::{BrandoModel, LayerOptions, MemoryState};
use model::config::ModelConfig;
use model::diego::{gather_answer_patterns, meta_mask, DiegoHead, DiegoModel};
use model::dio::{loss_brando_opts, loss_ce, loss_dio, DioModel};
use model::world::{codebook_usage, loss_weighted, noisy_option_scores, world_losses, WorldModel};

use crate::config::{Method, MemoryReset, Objective, Precision, RunConfig};
use crate::data::{BatchStream, Dataset};
use crate::evaluate::{evaluate, EvalReport, ScorerRef};
use crate::metrics::{MetricsLog, MetricsRecord};

/// Mid-run invariant violations (NaN loss, collapsed codebook) surface as
/// this error so the CLI can exit with a distinct code.
#[derive(Debug)]
pub struct InvariantViolation(pub String);

impl std::fmt::Display for InvariantViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "invariant violation: {}", self.0)
    }
}

impl std::error::Error for InvariantViolation {}

pub struct Trained {
    pub out_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub final_accuracy: Option<f64>,
    pub steps: u64,
}

pub fn train(cfg: &RunConfig) -> Result<Trained> {
    cfg.validate()?;
    match cfg.precision {
        Precision::F32 => train_typed::<f32>(cfg),
        Precision::F64 => train_typed::<f64>(cfg),
    }
}

fn train_typed<T: Scalar>(cfg: &RunConfig) -> Result<Trained> {
    let train_ds = Dataset::load(&cfg.data)?;
    if train_ds.is_empty() {
        bail!("training dataset {} is empty", cfg.data.display());
    }
    let val_ds = match &cfg.val_data {
        Some(p) => Some(Dataset::load(p)?),
        None => None,
    };
    let mcfg = cfg.model_config(train_ds.header.raster_size as usize);
    mcfg.validate()?;

    std::fs::create_dir_all(&cfg.out)?;
    let mut config_echo = cfg.to_text();
    config_echo.push_str(&format!("# dataset_digest = {}\n", train_ds.digest));
    std::fs::write(cfg.out.join("config.txt"), &config_echo)?;
    let metrics_path = cfg.out.join("metrics.jsonl");
    let mut log = MetricsLog::create(&metrics_path)?;

    let outcome = match cfg.method {
        Method::Dio => run_dio::<T>(cfg, &mcfg, &train_ds, val_ds.as_ref(), &mut log)?,
        Method::Brando => run_brando::<T>(cfg, &mcfg, &train_ds, val_ds.as_ref(), &mut log)?,
        Method::World => run_world::<T>(cfg, &mcfg, &train_ds, val_ds.as_ref(), &mut log)?,
        Method::Diego => run_diego::<T>(cfg, &mcfg, &train_ds, val_ds.as_ref(), &mut log)?,
    };
    Ok(outcome)
}

struct StepCtx<'a> {
    start: Instant,
    log: &'a mut MetricsLog,
    log_every: u64,
    eval_every: u64,
}

impl StepCtx<'_> {
    fn maybe_log(
        &mut self,
        step: u64,
        phase: &str,
        losses: &BTreeMap<String, f64>,
        accuracy: Option<f64>,
        usage: Option<f64>,
    ) -> Result<()> {
        if step % self.log_every == 0 || accuracy.is_some() {
            self.log.append(&MetricsRecord {
                step,
                phase: phase.into(),
                losses: losses.clone(),
                accuracy,
                codebook_usage: usage,
                wall_ms: self.start.elapsed().as_millis() as u64,
            })?;
        }
        Ok(())
    }
}

fn batch_parts<'a>(
    ds: &'a Dataset,
    idx: &[usize],
) -> (Vec<&'a [u8]>, Vec<usize>, Vec<&'a PuzzleInstance>) {
    let mut images = Vec::with_capacity(idx.len() * 16);
    let mut answers = Vec::with_capacity(idx.len());
    let mut insts = Vec::with_capacity(idx.len());
    for &i in idx {
        let inst = &ds.instances[i];
        images.extend(inst.images.iter().map(|v| v.as_slice()));
        answers.push(inst.answer as usize - 9);
        insts.push(inst);
    }
    (images, answers, insts)
}

fn ensure_finite(step: u64, name: &str, v: f64) -> Result<()> {
    if !v.is_finite() {
        bail!(InvariantViolation(format!(
            "{name} became {v} at step {step}; aborting, never skipping"
        )));
    }
    Ok(())
}

fn selection_loss<T: Scalar>(
    objective: Objective,
    scores: &autodiff::Tensor<T>,
    answers: &[usize],
) -> model::Result<autodiff::Tensor<T>> {
    match objective {
        Objective::Dio => loss_dio(scores, answers),
        Objective::CrossEntropy => loss_ce(scores, answers),
    }
}

fn finish<T: Scalar>(
    cfg: &RunConfig,
    store: &ParamStore<T>,
    scorer: &ScorerRef<'_>,
    val: Option<&Dataset>,
    steps: u64,
    log: &mut MetricsLog,
    start: Instant,
) -> Result<Trained> {
    let checkpoint = cfg.out.join("model.ckpt");
    save_checkpoint(store, &checkpoint)?;
    let final_accuracy = match val {
        Some(ds) => {
            let report = evaluate(scorer, store, &ds.instances, usize::MAX, cfg.batch.max(8))?;
            log.append(&MetricsRecord {
                step: steps,
                phase: "final".into(),
                losses: BTreeMap::new(),
                accuracy: Some(report.accuracy),
                codebook_usage: None,
                wall_ms: start.elapsed().as_millis() as u64,
            })?;
            Some(report.accuracy)
        }
        None => None,
    };
    Ok(Trained {
        out_dir: cfg.out.clone(),
        checkpoint,
        metrics: cfg.out.join("metrics.jsonl"),
        final_accuracy,
        steps,
    })
}

fn periodic_eval<T: Scalar>(
    cfg: &RunConfig,
    step: u64,
    scorer: &ScorerRef<'_>,
    store: &ParamStore<T>,
    val: Option<&Dataset>,
) -> Result<Option<f64>> {
    if step % cfg.eval_every != 0 {
        return Ok(None);
    }
    match val {
        Some(ds) => {
            let report = evaluate(scorer, store, &ds.instances, cfg.eval_max, cfg.batch.max(8))?;
            Ok(Some(report.accuracy))
        }
        None => Ok(None),
    }
}

fn run_dio<T: Scalar>(
    cfg: &RunConfig,
    mcfg: &ModelConfig,
    train: &Dataset,
    val: Option<&Dataset>,
    log: &mut MetricsLog,
) -> Result<Trained> {
    let start = Instant::now();
    let mut store = ParamStore::<T>::new();
    let mut init_rng = autodiff::seeded_rng(cfg.seed, Stream::Init);
    let model = DioModel::new(&mut store, &mut init_rng, mcfg);
    let mut order_rng = autodiff::seeded_rng(cfg.seed, Stream::DataOrder);
    let mut adam = Adam::new(AdamConfig { lr: cfg.lr, ..Default::default() });
    let mut stream = BatchStream::new(train.len());
    let mut ctx = StepCtx { start, log, log_every: cfg.log_every, eval_every: cfg.eval_every };

    for step in 1..=cfg.steps {
        let (idx, _) = stream.next_batch(cfg.batch, &mut order_rng);
        let (images, answers, _) = batch_parts(train, &idx);
        let (loss_v, grads) = {
            let g = Graph::<T>::new();
            let z = model.features(&g, &store, &images)?;
            let out = model.score_options(&g, &store, &z)?;
            let loss = selection_loss(cfg.objective, &out.scores, &answers)?;
            let lv = loss.item().to_f64();
            let mut grads = g.backward(&loss)?;
            (lv, g.param_grads(&mut grads))
        };
        ensure_finite(step, "selection loss", loss_v)?;
        adam.step(&mut store, &grads);

        let acc = periodic_eval(cfg, step, &ScorerRef::Dio(&model), &store, val)?;
        let mut losses = BTreeMap::new();
        losses.insert("l_dio".to_string(), loss_v);
        ctx.maybe_log(step, "train", &losses, acc, None)?;
    }
    finish(cfg, &store, &ScorerRef::Dio(&model), val, cfg.steps, ctx.log, start)
}

fn run_brando<T: Scalar>(
    cfg: &RunConfig,
    mcfg: &ModelConfig,
    train: &Dataset,
    val: Option<&Dataset>,
    log: &mut MetricsLog,
) -> Result<Trained> {
    let start = Instant::now();
    let mut store = ParamStore::<T>::new();
    let mut init_rng = autodiff::seeded_rng(cfg.seed, Stream::Init);
    let model = DioModel::new(&mut store, &mut init_rng, mcfg);
    let brando = BrandoModel::new(
        &mut store,
        &mut init_rng,
        mcfg,
        cfg.beta,
        cfg.brando_layers,
        cfg.gate_init,
    )?;
    let ckpt = cfg.init_from.as_ref().expect("validated");
    store
        .load_from_checkpoint(ckpt, false)
        .with_context(|| format!("loading phase-1 checkpoint {}", ckpt.display()))?;

    let mut order_rng = autodiff::seeded_rng(cfg.seed, Stream::DataOrder);
    let mut noise_rng = autodiff::seeded_rng(cfg.seed, Stream::BrandoNoise);
    let mut adam = Adam::new(AdamConfig { lr: cfg.lr, ..Default::default() });
    let mut stream = BatchStream::new(train.len());
    let mut memory = MemoryState::<T>::new(cfg.brando_layers, mcfg.dim);
    let mut ctx = StepCtx { start, log, log_every: cfg.log_every, eval_every: cfg.eval_every };

    for step in 1..=cfg.steps {
        let (idx, fresh_epoch) = stream.next_batch(cfg.batch, &mut order_rng);
        if fresh_epoch && cfg.memory_reset == MemoryReset::PerEpoch {
            memory.reset();
        }
        let (images, answers, _) = batch_parts(train, &idx);

        // every other iteration only the feature extractor (and the
        // hypothesis mapper) receives updates
        let freeze_core = (step - 1) % 2 == 0;
        store.freeze_where(freeze_core, |name| name.starts_with("core."));

        let (up_v, down_v, grads) = {
            let g = Graph::<T>::new();
            let z = model.features(&g, &store, &images)?;
            let z_ctx = z.slice_axis(1, 0, 8)?;
            let opts = LayerOptions {
                update_memory: true,
                history: cfg.history,
                noise: true,
            };
            let hyp =
                brando.map_hypotheses(&g, &store, &z_ctx, &mut memory, &opts, &mut noise_rng)?;
            let pool = z.slice_axis(1, 8, 16)?;
            let cands = g.concat(&[&pool, &hyp], 1)?;
            let out = model
                .core
                .score_candidates(&g, &store, &z_ctx, &cands, mcfg)?;
            let losses =
                loss_brando_opts(&out.scores, &answers, cfg.beta, cfg.down_stop_gradient)?;
            let (u, d) = (losses.up.item().to_f64(), losses.down.item().to_f64());
            let mut grads = g.backward(&losses.total)?;
            (u, d, g.param_grads(&mut grads))
        };
        ensure_finite(step, "hypothetical-option loss", up_v + down_v)?;
        adam.step(&mut store, &grads);
        store.freeze_where(false, |name| name.starts_with("core."));

        let acc = periodic_eval(cfg, step, &ScorerRef::Dio(&model), &store, val)?;
        let mut losses = BTreeMap::new();
        losses.insert("l_up".to_string(), up_v);
        losses.insert("l_down".to_string(), down_v);
        losses.insert("l_brando".to_string(), up_v + down_v);
        ctx.maybe_log(step, "phase2", &losses, acc, None)?;
    }
    finish(cfg, &store, &ScorerRef::Dio(&model), val, cfg.steps, ctx.log, start)
}

fn run_world<T: Scalar>(
    cfg: &RunConfig,
    mcfg: &ModelConfig,
    train: &Dataset,
    val: Option<&Dataset>,
    log: &mut MetricsLog,
) -> Result<Trained> {
    let start = Instant::now();
    let mut store = ParamStore::<T>::new();
    let mut init_rng = autodiff::seeded_rng(cfg.seed, Stream::Init);
    let model = WorldModel::new(&mut store, &mut init_rng, mcfg, cfg.components)?;
    let mut order_rng = autodiff::seeded_rng(cfg.seed, Stream::DataOrder);
    let mut noise_rng = autodiff::seeded_rng(cfg.seed, Stream::WorldNoise);
    let mut adam = Adam::new(AdamConfig { lr: cfg.lr, ..Default::default() });
    let mut stream = BatchStream::new(train.len());
    let mut ctx = StepCtx { start, log, log_every: cfg.log_every, eval_every: cfg.eval_every };

    // component usage measured over each epoch
    let mut epoch_used = vec![false; cfg.components];
    let mut last_usage: Option<f64> = None;

    for step in 1..=cfg.steps {
        let (idx, fresh_epoch) = stream.next_batch(cfg.batch, &mut order_rng);
        if fresh_epoch && step > 1 {
            let usage =
                epoch_used.iter().filter(|&&u| u).count() as f64 / cfg.components as f64;
            last_usage = Some(usage);
            if usage < cfg.usage_alarm {
                bail!(InvariantViolation(format!(
                    "codebook collapse: {:.1}% of components used in the last epoch (alarm at {:.1}%)",
                    usage * 100.0,
                    cfg.usage_alarm * 100.0
                )));
            }
            epoch_used.iter_mut().for_each(|u| *u = false);
        }
        let (images, answers, _) = batch_parts(train, &idx);

        let phase2 = cfg.phase2_at.map(|p| step > p).unwrap_or(false);
        let (vals, usage_now, grads) = {
            let g = Graph::<T>::new();
            let wl = world_losses(&g, &store, &model, &images, &mut noise_rng)?;
            for &a in &wl.assignments {
                epoch_used[a] = true;
            }
            let out = noisy_option_scores(&g, &store, &model, &wl.u, &mut noise_rng, true)?;
            let sel = selection_loss(cfg.objective, &out.scores, &answers)?;
            let mut total = wl.total.add(&sel)?;
            let mut weighted_v = None;
            if phase2 {
                let wb = cfg.weighted_batch.min(idx.len());
                let u_sub = wl.u.slice_axis(0, 0, wb)?;
                let w = loss_weighted(
                    &g,
                    &store,
                    &model,
                    &u_sub,
                    &answers[..wb],
                    &mut noise_rng,
                    cfg.component_chunk,
                )?;
                weighted_v = Some(w.item().to_f64());
                total = total.add(&w)?;
            }
            let mut vals = BTreeMap::new();
            vals.insert("l1".to_string(), wl.l1.item().to_f64());
            vals.insert("l2".to_string(), wl.l2.item().to_f64());
            vals.insert("l3".to_string(), wl.l3.item().to_f64());
            vals.insert("l4".to_string(), wl.l4.item().to_f64());
            vals.insert("l5".to_string(), wl.l5.item().to_f64());
            vals.insert("l_world".to_string(), wl.total.item().to_f64());
            vals.insert("l_dio".to_string(), sel.item().to_f64());
            if let Some(w) = weighted_v {
                vals.insert("l_weighted".to_string(), w);
            }
            vals.insert("total".to_string(), total.item().to_f64());
            let usage_now = codebook_usage(&wl.assignments, cfg.components);
            let mut grads = g.backward(&total)?;
            (vals, usage_now, g.param_grads(&mut grads))
        };
        ensure_finite(step, "world total loss", vals["total"])?;
        adam.step(&mut store, &grads);

        let acc = periodic_eval(cfg, step, &ScorerRef::World(&model), &store, val)?;
        let phase = if phase2 { "phase2" } else { "phase1" };
        ctx.maybe_log(step, phase, &vals, acc, last_usage.or(Some(usage_now)))?;
    }
    finish(cfg, &store, &ScorerRef::World(&model), val, cfg.steps, ctx.log, start)
}

fn run_diego<T: Scalar>(
    cfg: &RunConfig,
    mcfg: &ModelConfig,
    train: &Dataset,
    val: Option<&Dataset>,
    log: &mut MetricsLog,
) -> Result<Trained> {
    let start = Instant::now();
    let mut store = ParamStore::<T>::new();
    let mut init_rng = autodiff::seeded_rng(cfg.seed, Stream::Init);
    let model = DioModel::new(&mut store, &mut init_rng, mcfg);
    let head = DiegoHead::new(&mut store, &mut init_rng, mcfg.dim, cfg.l_meta);
    let mut order_rng = autodiff::seeded_rng(cfg.seed, Stream::DataOrder);
    let mut adam = Adam::new(AdamConfig { lr: cfg.lr, ..Default::default() });
    let mut stream = BatchStream::new(train.len());
    let mut ctx = StepCtx { start, log, log_every: cfg.log_every, eval_every: cfg.eval_every };

    for step in 1..=cfg.steps {
        let (idx, _) = stream.next_batch(cfg.batch, &mut order_rng);
        let (images, answers, insts) = batch_parts(train, &idx);
        let (dio_v, diego_v, grads) = {
            let g = Graph::<T>::new();
            let z = model.features(&g, &store, &images)?;
            let out = model.score_options(&g, &store, &z)?;
            let sel = selection_loss(cfg.objective, &out.scores, &answers)?;
            let patterns = gather_answer_patterns(&out.patterns, &answers)?;
            let (mask, mshape) = meta_mask::<T>(&insts, cfg.l_meta);
            let mask_t = g.constant(mask, &mshape)?;
            let align = model::diego::loss_diego(&g, &store, &head, &patterns, &mask_t)?;
            let total = sel.add(&align)?;
            let (a, b) = (sel.item().to_f64(), align.item().to_f64());
            let mut grads = g.backward(&total)?;
            (a, b, g.param_grads(&mut grads))
        };
        ensure_finite(step, "composite loss", dio_v + diego_v)?;
        adam.step(&mut store, &grads);

        let acc = periodic_eval(cfg, step, &ScorerRef::Dio(&model), &store, val)?;
        let mut losses = BTreeMap::new();
        losses.insert("l_dio".to_string(), dio_v);
        losses.insert("l_diego".to_string(), diego_v);
        ctx.maybe_log(step, "train", &losses, acc, None)?;
    }
    let _ = head;
    finish(cfg, &store, &ScorerRef::Dio(&model), val, cfg.steps, ctx.log, start)
}

/// A trained run reloaded from its output directory.
pub enum RunKind {
    Dio(DioModel),
    Brando(DioModel, BrandoModel),
    World(WorldModel),
    Diego(DiegoModel),
}

pub struct LoadedRun<T: Scalar> {
    pub config: RunConfig,
    pub model_config: ModelConfig,
    pub store: ParamStore<T>,
    pub kind: RunKind,
}

impl<T: Scalar> LoadedRun<T> {
    pub fn dio_model(&self) -> Option<&DioModel> {
        match &self.kind {
            RunKind::Dio(m) | RunKind::Brando(m, _) => Some(m),
            RunKind::Diego(d) => Some(&d.dio),
            RunKind::World(_) => None,
        }
    }

    pub fn scorer(&self) -> ScorerRef<'_> {
        match &self.kind {
            RunKind::Dio(m) | RunKind::Brando(m, _) => ScorerRef::Dio(m),
            RunKind::Diego(d) => ScorerRef::Dio(&d.dio),
            RunKind::World(m) => ScorerRef::World(m),
        }
    }
}

/// Rebuild the parameter structure a run trained with and load its weights.
/// `raster_size` must match the data the model will consume.
pub fn load_run<T: Scalar>(run_dir: &Path, raster_size: usize) -> Result<LoadedRun<T>> {
    let cfg = RunConfig::from_file(&run_dir.join("config.txt"))?;
    let mcfg = cfg.model_config(raster_size);
    mcfg.validate()?;
    let mut store = ParamStore::<T>::new();
    let mut init_rng = autodiff::seeded_rng(cfg.seed, Stream::Init);
    let kind = match cfg.method {
        Method::Dio => RunKind::Dio(DioModel::new(&mut store, &mut init_rng, &mcfg)),
        Method::Brando => {
            let dio = DioModel::new(&mut store, &mut init_rng, &mcfg);
            let brando = BrandoModel::new(
                &mut store,
                &mut init_rng,
                &mcfg,
                cfg.beta,
                cfg.brando_layers,
                cfg.gate_init,
            )?;
            RunKind::Brando(dio, brando)
        }
        Method::World => RunKind::World(WorldModel::new(
            &mut store,
            &mut init_rng,
            &mcfg,
            cfg.components,
        )?),
        Method::Diego => {
            let dio = DioModel::new(&mut store, &mut init_rng, &mcfg);
            let head = DiegoHead::new(&mut store, &mut init_rng, mcfg.dim, cfg.l_meta);
            RunKind::Diego(DiegoModel { dio, head })
        }
    };
    let ckpt = run_dir.join("model.ckpt");
    store
        .load_from_checkpoint(&ckpt, true)
        .with_context(|| format!("loading {}", ckpt.display()))?;
    Ok(LoadedRun {
        config: cfg,
        model_config: mcfg,
        store,
        kind,
    })
}

pub fn eval_run(run_dir: &Path, data: &Path, max_instances: usize) -> Result<EvalReport> {
    let ds = Dataset::load(data)?;
    let run = load_run::<f32>(run_dir, ds.header.raster_size as usize)?;
    evaluate(&run.scorer(), &run.store, &ds.instances, max_instances, 32)
}
