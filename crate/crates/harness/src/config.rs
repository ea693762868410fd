//! Run configuration: plain-text key-value files plus CLI overrides.
//! Unknown keys are rejected so typos fail loudly.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use model::config::ModelConfig;

pub const DATA_ROOT_ENV: &str = "DIO_DATA_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Dio,
    Brando,
    World,
    Diego,
}

impl Method {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "dio" => Method::Dio,
            "brando" => Method::Brando,
            "world" => Method::World,
            "diego" => Method::Diego,
            other => bail!("unknown method '{other}' (dio|brando|world|diego)"),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Method::Dio => "dio",
            Method::Brando => "brando",
            Method::World => "world",
            Method::Diego => "diego",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MemoryReset {
    Never,
    PerEpoch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    Dio,
    CrossEntropy,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub method: Method,
    pub data: PathBuf,
    pub val_data: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: u64,
    pub precision: Precision,

    // model dims
    pub dim: usize,
    pub heads: usize,
    pub vit_depth: usize,
    pub ppim_depth: usize,
    pub pcem_depth: usize,
    pub ff_mult: usize,
    pub patch: usize,
    pub ppim_pos_enc: bool,
    pub masked_ppim: bool,

    // schedule
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    pub eval_every: u64,
    pub eval_max: usize,
    pub log_every: u64,
    pub objective: Objective,

    // brando
    pub beta: usize,
    pub brando_layers: usize,
    pub gate_init: f64,
    pub memory_reset: MemoryReset,
    pub history: bool,
    pub down_stop_gradient: bool,
    pub init_from: Option<PathBuf>,

    // world
    pub components: usize,
    pub phase2_at: Option<u64>,
    pub weighted_batch: usize,
    pub component_chunk: usize,
    pub usage_alarm: f64,

    // diego
    pub l_meta: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            method: Method::Dio,
            data: PathBuf::from("data/train.rpmd"),
            val_data: None,
            out: PathBuf::from("runs/run"),
            seed: 42,
            precision: Precision::F32,
            dim: 32,
            heads: 4,
            vit_depth: 2,
            ppim_depth: 2,
            pcem_depth: 2,
            ff_mult: 2,
            patch: 8,
            ppim_pos_enc: true,
            masked_ppim: false,
            steps: 5000,
            batch: 32,
            lr: 1e-3,
            eval_every: 500,
            eval_max: 256,
            log_every: 25,
            objective: Objective::Dio,
            beta: 24,
            brando_layers: 3,
            gate_init: 0.0,
            memory_reset: MemoryReset::Never,
            history: true,
            down_stop_gradient: false,
            init_from: None,
            components: 512,
            phase2_at: None,
            weighted_batch: 2,
            component_chunk: 64,
            usage_alarm: 0.05,
            l_meta: 2,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .with_context(|| format!("{}:{}: expected key = value", path.display(), lineno + 1))?;
            cfg.set(k.trim(), v.trim())
                .with_context(|| format!("{}:{}", path.display(), lineno + 1))?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "method" => self.method = Method::parse(value)?,
            "data" => self.data = resolve_data_path(value),
            "val_data" => self.val_data = Some(resolve_data_path(value)),
            "out" => self.out = PathBuf::from(value),
            "seed" => self.seed = value.parse()?,
            "precision" => {
                self.precision = match value {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    other => bail!("precision must be f32 or f64, got '{other}'"),
                }
            }
            "dim" => self.dim = value.parse()?,
            "heads" => self.heads = value.parse()?,
            "vit_depth" => self.vit_depth = value.parse()?,
            "ppim_depth" => self.ppim_depth = value.parse()?,
            "pcem_depth" => self.pcem_depth = value.parse()?,
            "ff_mult" => self.ff_mult = value.parse()?,
            "patch" => self.patch = value.parse()?,
            "ppim_pos_enc" => self.ppim_pos_enc = parse_bool(value)?,
            "masked_ppim" => self.masked_ppim = parse_bool(value)?,
            "steps" => self.steps = value.parse()?,
            "batch" => self.batch = value.parse()?,
            "lr" => self.lr = value.parse()?,
            "eval_every" => self.eval_every = value.parse()?,
            "eval_max" => self.eval_max = value.parse()?,
            "log_every" => self.log_every = value.parse()?,
            "objective" => {
                self.objective = match value {
                    "dio" => Objective::Dio,
                    "ce" => Objective::CrossEntropy,
                    other => bail!("objective must be dio or ce, got '{other}'"),
                }
            }
            "beta" => self.beta = value.parse()?,
            "brando_layers" | "layers" => self.brando_layers = value.parse()?,
            "gate_init" | "gate-init" => self.gate_init = value.parse()?,
            "memory_reset" | "memory-reset-policy" => {
                self.memory_reset = match value {
                    "never" => MemoryReset::Never,
                    "per-epoch" => MemoryReset::PerEpoch,
                    other => bail!("memory reset must be never or per-epoch, got '{other}'"),
                }
            }
            "history" => self.history = parse_bool(value)?,
            "down_stop_gradient" => self.down_stop_gradient = parse_bool(value)?,
            "init_from" => self.init_from = Some(PathBuf::from(value)),
            "components" | "m" => self.components = value.parse()?,
            "phase2_at" => self.phase2_at = Some(value.parse()?),
            "weighted_batch" => self.weighted_batch = value.parse()?,
            "component_chunk" => self.component_chunk = value.parse()?,
            "usage_alarm" => self.usage_alarm = value.parse()?,
            "l_meta" => self.l_meta = value.parse()?,
            other => bail!("unknown config key '{other}'"),
        }
        Ok(())
    }

    /// Method-specific key validation.
    pub fn validate(&self) -> Result<()> {
        if self.method == Method::Brando {
            if self.beta <= 17 {
                bail!("brando needs beta > 17, got {}", self.beta);
            }
            if self.init_from.is_none() {
                bail!("brando joint training starts from a pretrained checkpoint: set init_from");
            }
        }
        if self.method == Method::World && self.components < 2 {
            bail!("world needs components >= 2, got {}", self.components);
        }
        if self.method == Method::Diego && !(1..=4).contains(&self.l_meta) {
            bail!("l_meta must be in 1..=4, got {}", self.l_meta);
        }
        if self.batch == 0 || self.steps == 0 {
            bail!("steps and batch must be positive");
        }
        Ok(())
    }

    pub fn model_config(&self, raster_size: usize) -> ModelConfig {
        ModelConfig {
            raster_size,
            patch: self.patch,
            dim: self.dim,
            heads: self.heads,
            vit_depth: self.vit_depth,
            ppim_depth: self.ppim_depth,
            pcem_depth: self.pcem_depth,
            ff_mult: self.ff_mult,
            ppim_pos_enc: self.ppim_pos_enc,
            masked_ppim: self.masked_ppim,
        }
    }

    /// Resolved key-value echo, written next to each run's artifacts.
    pub fn to_text(&self) -> String {
        let mut pairs: BTreeMap<&str, String> = BTreeMap::new();
        pairs.insert("method", self.method.name().into());
        pairs.insert("data", self.data.display().to_string());
        if let Some(v) = &self.val_data {
            pairs.insert("val_data", v.display().to_string());
        }
        pairs.insert("out", self.out.display().to_string());
        pairs.insert("seed", self.seed.to_string());
        pairs.insert(
            "precision",
            match self.precision {
                Precision::F32 => "f32".into(),
                Precision::F64 => "f64".into(),
            },
        );
        pairs.insert("dim", self.dim.to_string());
        pairs.insert("heads", self.heads.to_string());
        pairs.insert("vit_depth", self.vit_depth.to_string());
        pairs.insert("ppim_depth", self.ppim_depth.to_string());
        pairs.insert("pcem_depth", self.pcem_depth.to_string());
        pairs.insert("ff_mult", self.ff_mult.to_string());
        pairs.insert("patch", self.patch.to_string());
        pairs.insert("ppim_pos_enc", self.ppim_pos_enc.to_string());
        pairs.insert("masked_ppim", self.masked_ppim.to_string());
        pairs.insert("steps", self.steps.to_string());
        pairs.insert("batch", self.batch.to_string());
        pairs.insert("lr", self.lr.to_string());
        pairs.insert("eval_every", self.eval_every.to_string());
        pairs.insert("eval_max", self.eval_max.to_string());
        pairs.insert("log_every", self.log_every.to_string());
        pairs.insert(
            "objective",
            match self.objective {
                Objective::Dio => "dio".into(),
                Objective::CrossEntropy => "ce".into(),
            },
        );
        pairs.insert("beta", self.beta.to_string());
        pairs.insert("brando_layers", self.brando_layers.to_string());
        pairs.insert("gate_init", self.gate_init.to_string());
        pairs.insert(
            "memory_reset",
            match self.memory_reset {
                MemoryReset::Never => "never".into(),
                MemoryReset::PerEpoch => "per-epoch".into(),
            },
        );
        pairs.insert("history", self.history.to_string());
        pairs.insert("down_stop_gradient", self.down_stop_gradient.to_string());
        if let Some(v) = &self.init_from {
            pairs.insert("init_from", v.display().to_string());
        }
        pairs.insert("components", self.components.to_string());
        if let Some(v) = self.phase2_at {
            pairs.insert("phase2_at", v.to_string());
        }
        pairs.insert("weighted_batch", self.weighted_batch.to_string());
        pairs.insert("component_chunk", self.component_chunk.to_string());
        pairs.insert("usage_alarm", self.usage_alarm.to_string());
        pairs.insert("l_meta", self.l_meta.to_string());
        let mut out = String::new();
        for (k, v) in pairs {
            writeln!(out, "{k} = {v}").unwrap();
        }
        out
    }
}

fn parse_bool(v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "on" => Ok(true),
        "false" | "0" | "off" => Ok(false),
        other => bail!("expected a boolean, got '{other}'"),
    }
}

/// Relative data paths resolve under the data-root env var when it is set.
pub fn resolve_data_path(value: &str) -> PathBuf {
    let p = PathBuf::from(value);
    if p.is_absolute() {
        return p;
    }
    match std::env::var_os(DATA_ROOT_ENV) {
        Some(root) => PathBuf::from(root).join(p),
        None => p,
    }
}
