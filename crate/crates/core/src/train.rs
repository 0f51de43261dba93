//! The training loop.

use std::path::PathBuf;

use crate::autograd::Tape;
use crate::checkpoint::{Checkpoint, RngState};
use crate::data::{Batch, TrainingStream};
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossConfig, LossMode};
use crate::network::Model;
use crate::optim::{lr_at, Adam, AdamConfig, Schedule};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iterations: u64,
    pub lr_init: f64,
    pub schedule: Schedule,
    pub adam: AdamConfig,
    pub loss: LossConfig,
    pub seed: u64,
    /// A log record is emitted every `log_every` iterations and at the end.
    pub log_every: u64,
    /// Zero disables periodic checkpoints; the final one is still written
    /// when `checkpoint_path` is set.
    pub checkpoint_every: u64,
    pub checkpoint_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    /// Synthetic-noise settings.
    fn default() -> Self {
        TrainConfig {
            iterations: 500_000,
            lr_init: 1e-4,
            schedule: Schedule::StepHalving { period: 100_000 },
            adam: AdamConfig::default(),
            loss: LossConfig::default(),
            seed: 0,
            log_every: 100,
            checkpoint_every: 10_000,
            checkpoint_path: None,
        }
    }
}

/// Training passes over a real-noise set of this many patches.
pub const REAL_NOISE_EPOCHS: u64 = 120;

impl TrainConfig {
    /// Real-noise settings: Charbonnier plus edge loss and cosine annealing
    /// from 2e-4 to 1e-6 over `120 · ⌈patches / batch⌉` iterations.
    pub fn real_noise(dataset_patches: u64, batch: u64) -> Self {
        let iterations = REAL_NOISE_EPOCHS * dataset_patches.div_ceil(batch.max(1));
        TrainConfig {
            iterations,
            lr_init: 2e-4,
            schedule: Schedule::Cosine {
                min_lr: 1e-6,
                horizon: iterations,
            },
            loss: LossConfig {
                mode: LossMode::CharbonnierEdge,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iteration count must be positive".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log interval must be positive".into()));
        }
        let AdamConfig { beta1, beta2, eps } = self.adam;
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
            return Err(Error::Config(format!("invalid Adam settings {:?}", self.adam)));
        }
        self.schedule.validate(self.lr_init, self.iterations)?;
        self.loss.validate()
    }

    pub fn lr_at(&self, iteration: u64) -> f64 {
        lr_at(self.schedule, self.lr_init, iteration)
    }
}

/// Anything that can produce batch number `index` on demand.
pub trait BatchSource {
    fn batch(&self, index: u64) -> Result<Batch>;
}

impl BatchSource for TrainingStream {
    fn batch(&self, index: u64) -> Result<Batch> {
        Ok(TrainingStream::batch(self, index))
    }
}

/// The same batch at every iteration.
#[derive(Clone, Debug)]
pub struct FixedBatch(pub Batch);

impl BatchSource for FixedBatch {
    fn batch(&self, _: u64) -> Result<Batch> {
        Ok(self.0.clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRecord {
    pub iteration: u64,
    pub loss: f64,
    pub lr: f64,
}

impl LogRecord {
    /// `iteration,loss,lr`.
    pub fn to_line(&self) -> String {
        format!("{},{:.9e},{:.9e}", self.iteration, self.loss, self.lr)
    }
}

pub struct Trainer {
    pub model: Model<f32>,
    pub optimizer: Adam,
    pub config: TrainConfig,
    /// Number of completed updates; also the index of the next batch.
    pub iteration: u64,
}

impl Trainer {
    pub fn new(model: Model<f32>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = Adam::new(config.adam, &model.params);
        Ok(Trainer {
            model,
            optimizer,
            config,
            iteration: 0,
        })
    }

    /// Continues from `ck`. The data seed is taken from the checkpoint.
    pub fn resume(ck: Checkpoint, mut config: TrainConfig) -> Result<Self> {
        config.validate()?;
        config.seed = ck.rng.seed;
        let iteration = ck.iteration;
        let optimizer_state = ck.optimizer.clone();
        let model = ck.into_model()?;
        let optimizer = match optimizer_state {
            Some(state) => Adam::with_state(config.adam, state, &model.params)?,
            None => Adam::new(config.adam, &model.params),
        };
        Ok(Trainer {
            model,
            optimizer,
            config,
            iteration,
        })
    }

    /// Total loss of the model on `batch`, without updating anything.
    pub fn evaluate(&self, batch: &Batch) -> Result<f64> {
        let mut tape = Tape::new();
        let y = tape.constant(batch.noisy.clone());
        let gt = tape.constant(batch.clean.clone());
        let (x1, x2) = self.model.forward(&mut tape, y)?;
        let loss = total_loss(&mut tape, x1, x2, gt, &self.config.loss)?;
        Ok(tape.value(loss)?.item()? as f64)
    }

    /// One Adam update on `batch`; returns the loss before the update.
    pub fn step(&mut self, batch: &Batch) -> Result<LogRecord> {
        let mut tape = Tape::new();
        let y = tape.constant(batch.noisy.clone());
        let gt = tape.constant(batch.clean.clone());
        let (x1, x2) = self.model.forward(&mut tape, y)?;
        let loss = total_loss(&mut tape, x1, x2, gt, &self.config.loss)?;
        let value = tape.value(loss)?.item()? as f64;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: self.iteration,
                loss: value,
            });
        }
        tape.backward(loss)?;
        self.model.params.zero_grad();
        tape.accumulate_param_grads(&mut self.model.params)?;
        let lr = self.config.lr_at(self.iteration);
        self.optimizer.step(&mut self.model.params, lr)?;
        let record = LogRecord {
            iteration: self.iteration,
            loss: value,
            lr,
        };
        self.iteration += 1;
        Ok(record)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.model.config().clone(),
            params: self.model.params.clone(),
            iteration: self.iteration,
            rng: RngState {
                seed: self.config.seed,
                next_batch: self.iteration,
            },
            optimizer: Some(self.optimizer.state.clone()),
        }
    }

    fn save_checkpoint(&self) -> Result<()> {
        if let Some(path) = &self.config.checkpoint_path {
            self.checkpoint().save(path)?;
            log::info!("checkpoint at iteration {} written to {}", self.iteration, path.display());
        }
        Ok(())
    }

    /// Trains until `config.iterations` updates have been made, calling
    /// `on_log` for every emitted record.
    pub fn run(&mut self, source: &dyn BatchSource, on_log: &mut dyn FnMut(&LogRecord)) -> Result<Vec<LogRecord>> {
        let mut log = Vec::new();
        while self.iteration < self.config.iterations {
            let batch = source.batch(self.iteration)?;
            let record = self.step(&batch)?;
            if record.iteration % self.config.log_every == 0 || self.iteration == self.config.iterations {
                on_log(&record);
                log.push(record);
            }
            let every = self.config.checkpoint_every;
            if every > 0 && self.iteration.is_multiple_of(every) && self.iteration < self.config.iterations {
                self.save_checkpoint()?;
            }
        }
        self.save_checkpoint()?;
        Ok(log)
    }
}
