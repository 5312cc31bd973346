//! Run configuration: desk-scale defaults, the full-scale preset,
//! and the key-value config file format.

use crate::adapters::{AdapterKind, CifConfig, WlqConfig};
use crate::error::{Error, Result};
use crate::numkernel::encoder::EncoderStackConfig;
use crate::numkernel::schedule::ScheduleConfig;
use crate::toystack::{SfmPreset, Task};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub adapter_kind: AdapterKind,
    pub sfm_preset: SfmPreset,
    pub lm_checkpoint: PathBuf,
    pub manifest: PathBuf,
    pub task: Task,
    pub steps: usize,
    pub micro_batch: usize,
    pub grad_accum: usize,
    pub schedule: ScheduleConfig,
    pub aux_weight: f64,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub adapter_stack: EncoderStackConfig,
    pub cif: CifConfig,
    pub wlq: WlqConfig,
    pub sfm_dim: usize,
    pub weight_decay: f64,
    pub max_gen_len: usize,
    /// Place the audio block before the prompt in the joined LM input.
    pub audio_first: bool,
}

impl RunConfig {
    /// Desk-scale defaults: 2,000 steps, micro-batch 8, accumulation 2, and
    /// small model dimensions that train in minutes on one CPU core.
    pub fn desk() -> Self {
        let steps = 2000;
        Self {
            adapter_kind: AdapterKind::Base,
            sfm_preset: SfmPreset::WhisperLike,
            lm_checkpoint: PathBuf::from("lm.afck"),
            manifest: PathBuf::from("data/manifest.tsv"),
            task: Task::Asr,
            steps,
            micro_batch: 8,
            grad_accum: 2,
            schedule: ScheduleConfig {
                peak_lr: 2e-3,
                warmup_steps: steps / 10,
                total_steps: steps,
                floor_lr: 0.0,
            },
            aux_weight: 0.1,
            seed: 0,
            out_dir: PathBuf::from("runs/run"),
            adapter_stack: EncoderStackConfig::new(4, 32, 64, 4),
            cif: CifConfig::default(),
            wlq: WlqConfig::default(),
            sfm_dim: 32,
            weight_decay: 0.01,
            max_gen_len: 12,
            audio_first: false,
        }
    }

    /// The full-scale recipe: 28,000 steps, micro-batch 10 with 4
    /// accumulation steps, peak 1e-4 after an 840-step warmup, and the
    /// BERT-base adapter stack. Kept as a named preset; not used by tests.
    pub fn full_scale() -> Self {
        Self {
            steps: 28_000,
            micro_batch: 10,
            grad_accum: 4,
            schedule: ScheduleConfig::full_scale(),
            adapter_stack: EncoderStackConfig::default(),
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::Config("steps must be >= 1".into()));
        }
        if self.micro_batch < 1 || self.grad_accum < 1 {
            return Err(Error::Config(
                "micro_batch and grad_accum must be >= 1".into(),
            ));
        }
        if self.aux_weight < 0.0 {
            return Err(Error::Config("aux_weight must be non-negative".into()));
        }
        if self.sfm_dim < 1 {
            return Err(Error::Config("sfm_dim must be >= 1".into()));
        }
        if self.max_gen_len < 1 {
            return Err(Error::Config("max_gen_len must be >= 1".into()));
        }
        self.schedule.validate()?;
        self.adapter_stack.validate()?;
        self.cif.validate()?;
        self.wlq.validate()?;
        Ok(())
    }

    /// Applies one documented `key = value` setting.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        let parse_usize = |v: &str| -> Result<usize> {
            v.parse()
                .map_err(|_| Error::Config(format!("bad integer `{v}` for `{key}`")))
        };
        let parse_f64 = |v: &str| -> Result<f64> {
            v.parse()
                .map_err(|_| Error::Config(format!("bad number `{v}` for `{key}`")))
        };
        match key {
            "adapter" => self.adapter_kind = value.parse()?,
            "preset" => self.sfm_preset = value.parse()?,
            "lm_checkpoint" => self.lm_checkpoint = PathBuf::from(value),
            "manifest" => self.manifest = PathBuf::from(value),
            "task" => self.task = value.parse()?,
            "steps" => {
                self.steps = parse_usize(value)?;
                // keep the schedule tied to the run length unless overridden
                self.schedule.total_steps = self.steps;
                self.schedule.warmup_steps = self.schedule.warmup_steps.min(self.steps / 10);
            }
            "micro_batch" => self.micro_batch = parse_usize(value)?,
            "grad_accum" => self.grad_accum = parse_usize(value)?,
            "peak_lr" => self.schedule.peak_lr = parse_f64(value)?,
            "warmup_steps" => self.schedule.warmup_steps = parse_usize(value)?,
            "total_steps" => self.schedule.total_steps = parse_usize(value)?,
            "floor_lr" => self.schedule.floor_lr = parse_f64(value)?,
            "aux_weight" => self.aux_weight = parse_f64(value)?,
            "seed" => {
                self.seed = value
                    .parse()
                    .map_err(|_| Error::Config(format!("bad seed `{value}`")))?
            }
            "out_dir" => self.out_dir = PathBuf::from(value),
            "adapter_layers" => self.adapter_stack.n_layers = parse_usize(value)?,
            "adapter_hidden" => self.adapter_stack.hidden = parse_usize(value)?,
            "adapter_intermediate" => self.adapter_stack.intermediate = parse_usize(value)?,
            "adapter_heads" => self.adapter_stack.n_heads = parse_usize(value)?,
            "sfm_dim" => self.sfm_dim = parse_usize(value)?,
            "cif_beta" => self.cif.beta = parse_f64(value)?,
            "wlq_window_seconds" => self.wlq.window_seconds = parse_f64(value)?,
            "wlq_queries" => self.wlq.n_queries = parse_usize(value)?,
            "wlq_layers" => self.wlq.n_layers = parse_usize(value)?,
            "weight_decay" => self.weight_decay = parse_f64(value)?,
            "max_gen_len" => self.max_gen_len = parse_usize(value)?,
            "audio_first" => {
                self.audio_first = value
                    .parse()
                    .map_err(|_| Error::Config(format!("bad boolean `{value}` for `{key}`")))?
            }
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Loads a UTF-8 `key = value` file over the desk defaults. Lines
    /// starting with `#` are comments.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut cfg = Self::desk();
        cfg.apply_file(path)?;
        Ok(cfg)
    }

    pub fn apply_file(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "{}:{}: expected `key = value`",
                    path.display(),
                    lineno + 1
                ))
            })?;
            self.apply_kv(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn cell_name(&self) -> String {
        format!("{}__{}", self.sfm_preset, self.adapter_kind)
    }
}
