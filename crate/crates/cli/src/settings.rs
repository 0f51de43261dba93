//! Training settings: defaults, then a `key = value` file, then flags.
//!
//! Recognized keys (`#` starts a comment, blank lines are ignored):
//!
//! | key | default |
//! |-----|---------|
//! | `modules` | 5 |
//! | `sampling_depth` | 2 |
//! | `base_width` | 64 |
//! | `growth` | 32 |
//! | `dilations` | `1,2,3,4,4,3,2,1` |
//! | `attention_ratio` | 8 |
//! | `channel_policy` | `double` (or `constant`) |
//! | `grayscale` | `true` |
//! | `iterations` | 500000 |
//! | `batch` | 4 |
//! | `patch` | 128 |
//! | `lr` | 1e-4 |
//! | `schedule` | `step` (or `cosine`) |
//! | `step_period` | 100000, or `iterations` if smaller |
//! | `min_lr` | 1e-6 |
//! | `cosine_horizon` | `iterations` |
//! | `loss` | `mse` (or `charbonnier`) |
//! | `epsilon` | 1e-3 |
//! | `lambda_edge` | 0.1 |
//! | `sigma_min` | 0 |
//! | `sigma_max` | 50 |
//! | `seed` | 0 |
//! | `log_every` | 100 |
//! | `checkpoint_every` | 10000 |

use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use rdanet::data::{NoiseSpec, StreamConfig};
use rdanet::{ChannelPolicy, LossMode, ModelConfig, Schedule, TrainConfig};

const DEFAULT_STEP_PERIOD: u64 = 100_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    Step,
    Cosine,
}

impl FromStr for ScheduleKind {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "step" => Ok(ScheduleKind::Step),
            "cosine" => Ok(ScheduleKind::Cosine),
            other => bail!("unknown schedule {other:?} (expected step or cosine)"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    pub model: ModelConfig,
    pub grayscale: bool,
    pub iterations: u64,
    pub batch: usize,
    pub patch: usize,
    pub lr: f64,
    pub schedule: ScheduleKind,
    pub step_period: Option<u64>,
    pub min_lr: f64,
    pub cosine_horizon: Option<u64>,
    pub loss: LossMode,
    pub epsilon: f64,
    pub lambda_edge: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub seed: u64,
    pub log_every: u64,
    pub checkpoint_every: u64,
}

impl Default for Settings {
    fn default() -> Self {
        let train = TrainConfig::default();
        let stream = StreamConfig::default();
        Settings {
            model: ModelConfig::default(),
            grayscale: stream.grayscale,
            iterations: train.iterations,
            batch: stream.batch,
            patch: stream.patch,
            lr: train.lr_init,
            schedule: ScheduleKind::Step,
            step_period: None,
            min_lr: 1e-6,
            cosine_horizon: None,
            loss: train.loss.mode,
            epsilon: train.loss.epsilon,
            lambda_edge: train.loss.lambda_edge,
            sigma_min: stream.noise.sigma_min,
            sigma_max: stream.noise.sigma_max,
            seed: train.seed,
            log_every: train.log_every,
            checkpoint_every: train.checkpoint_every,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| anyhow!("invalid value {value:?} for {key}: {e}"))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => bail!("invalid value {value:?} for {key}: expected true or false"),
    }
}

impl Settings {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "modules" => self.model.modules = parse(key, value)?,
            "sampling_depth" => self.model.sampling_depth = parse(key, value)?,
            "base_width" => self.model.base_width = parse(key, value)?,
            "growth" => self.model.growth = parse(key, value)?,
            "dilations" => {
                self.model.dilations = value
                    .split(',')
                    .map(|v| parse(key, v.trim()))
                    .collect::<Result<Vec<usize>>>()?
            }
            "attention_ratio" => self.model.attention_ratio = parse(key, value)?,
            "channel_policy" => self.model.channel_policy = parse::<ChannelPolicy>(key, value)?,
            "grayscale" => self.grayscale = parse_bool(key, value)?,
            "iterations" => self.iterations = parse(key, value)?,
            "batch" => self.batch = parse(key, value)?,
            "patch" => self.patch = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "schedule" => self.schedule = value.parse()?,
            "step_period" => self.step_period = Some(parse(key, value)?),
            "min_lr" => self.min_lr = parse(key, value)?,
            "cosine_horizon" => self.cosine_horizon = Some(parse(key, value)?),
            "loss" => self.loss = parse::<LossMode>(key, value)?,
            "epsilon" => self.epsilon = parse(key, value)?,
            "lambda_edge" => self.lambda_edge = parse(key, value)?,
            "sigma_min" => self.sigma_min = parse(key, value)?,
            "sigma_max" => self.sigma_max = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "log_every" => self.log_every = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            other => bail!("unknown configuration key {other:?}"),
        }
        Ok(())
    }

    /// Applies every `key = value` line of `text`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected key = value, got {raw:?}", n + 1))?;
            self.set(key.trim(), value.trim())
                .with_context(|| format!("line {}", n + 1))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            anyhow::Error::new(rdanet::Error::Io {
                path: path.to_path_buf(),
                source: e,
            })
        })?;
        self.apply_text(&text)
            .with_context(|| format!("in config file {}", path.display()))
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            image_channels: if self.grayscale { 1 } else { 3 },
            ..self.model.clone()
        }
    }

    pub fn stream_config(&self) -> StreamConfig {
        StreamConfig {
            patch: self.patch,
            batch: self.batch,
            noise: NoiseSpec {
                sigma_min: self.sigma_min,
                sigma_max: self.sigma_max,
            },
            grayscale: self.grayscale,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let schedule = match self.schedule {
            ScheduleKind::Step => Schedule::StepHalving {
                period: self.step_period.unwrap_or(DEFAULT_STEP_PERIOD.min(self.iterations)),
            },
            ScheduleKind::Cosine => Schedule::Cosine {
                min_lr: self.min_lr,
                horizon: self.cosine_horizon.unwrap_or(self.iterations),
            },
        };
        let defaults = TrainConfig::default();
        TrainConfig {
            iterations: self.iterations,
            lr_init: self.lr,
            schedule,
            loss: rdanet::LossConfig {
                mode: self.loss,
                epsilon: self.epsilon,
                lambda_edge: self.lambda_edge,
            },
            seed: self.seed,
            log_every: self.log_every,
            checkpoint_every: self.checkpoint_every,
            ..defaults
        }
    }
}
