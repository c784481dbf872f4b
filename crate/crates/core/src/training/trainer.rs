use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::{Batch, Checkpoint, Model};

use super::data::{make_batches, Sequence};
use super::optim::{clip_grad_norm, AdamW, AdamWConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub block_chars: usize,
    pub epochs: usize,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub seed: u64,
    /// Epochs between evaluations and checkpoints.
    pub eval_every: usize,
    #[serde(default)]
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            batch_size: 2,
            block_chars: 192,
            epochs: 100,
            betas: (0.9, 0.999),
            weight_decay: 0.1,
            seed: 0,
            eval_every: 1,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail("lr must be positive");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1");
        }
        if self.epochs == 0 {
            return fail("epochs must be at least 1");
        }
        if self.eval_every == 0 {
            return fail("eval_every must be at least 1");
        }
        if self.block_chars == 0 {
            return fail("block_chars must be positive");
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return fail("betas must lie in [0, 1)");
        }
        if self.weight_decay < 0.0 {
            return fail("weight_decay must be non-negative");
        }
        if self.clip_norm.is_some_and(|c| c <= 0.0) {
            return fail("clip_norm must be positive");
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.betas.0,
            beta2: self.betas.1,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

/// Validation numbers reported by the evaluation callback.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ValMetrics {
    pub val_word_acc: f64,
    pub val_char_acc: f64,
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub step: u64,
    pub train_loss: f64,
    pub val_word_acc: f64,
    pub val_char_acc: f64,
}

pub struct Trainer {
    model: Model<f32>,
    opt: AdamW<f32>,
    config: TrainConfig,
    exec: Exec,
    step: u64,
    loss_sum: f64,
    loss_count: u64,
}

fn decay_mask(model: &Model<f32>) -> Vec<bool> {
    model.specs().iter().map(|s| s.kind.decays()).collect()
}

impl Trainer {
    pub fn new(model: Model<f32>, config: TrainConfig, exec: Exec) -> Result<Self> {
        config.validate()?;
        let opt = AdamW::new(config.adamw(), model.params(), decay_mask(&model));
        Ok(Trainer {
            model,
            opt,
            config,
            exec,
            step: 0,
            loss_sum: 0.0,
            loss_count: 0,
        })
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(ckpt: Checkpoint, config: TrainConfig, exec: Exec) -> Result<Self> {
        config.validate()?;
        let model = ckpt.model()?;
        let state = ckpt
            .optimizer
            .ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state".into()))?;
        let opt = AdamW::with_state(config.adamw(), state, model.params(), decay_mask(&model))?;
        let num = |k: &str| ckpt.meta.get(k).and_then(serde_json::Value::as_f64);
        Ok(Trainer {
            model,
            opt,
            config,
            exec,
            step: ckpt.step,
            loss_sum: num("epoch_loss_sum").unwrap_or(0.0),
            loss_count: num("epoch_loss_count").unwrap_or(0.0) as u64,
        })
    }

    pub fn model(&self) -> &Model<f32> {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// One forward/backward pass and AdamW update; returns the batch loss.
    pub fn train_step(&mut self, batch: &Batch) -> Result<f64> {
        let (loss, mut grads) = self.model.batch_gradients(batch, self.exec)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                op: format!("training loss at step {}", self.step + 1),
            });
        }
        if let Some(c) = self.config.clip_norm {
            clip_grad_norm(&mut grads, c);
        }
        self.opt.step(self.model.params_mut(), &grads)?;
        if let Some(i) = self.model.params().iter().position(|p| !p.is_finite()) {
            return Err(Error::NonFinite {
                op: format!("update of {} at step {}", self.model.specs()[i].name, self.step + 1),
            });
        }
        self.step += 1;
        self.loss_sum += loss;
        self.loss_count += 1;
        Ok(loss)
    }

    pub fn steps_per_epoch(&self, seqs: &[Sequence]) -> u64 {
        seqs.len().div_ceil(self.config.batch_size) as u64
    }

    /// Trains until `config.epochs` are complete or `max_steps` total steps
    /// have been taken. `on_epoch` runs after every completed epoch with the
    /// epoch number (1-based) and the epoch's mean training loss.
    pub fn run(
        &mut self,
        seqs: &[Sequence],
        max_steps: Option<u64>,
        mut on_epoch: impl FnMut(&mut Trainer, usize, f64) -> Result<()>,
    ) -> Result<()> {
        let per_epoch = self.steps_per_epoch(seqs);
        let c = self.model.config().clone();
        let total = per_epoch * self.config.epochs as u64;
        while self.step < total {
            if max_steps.is_some_and(|m| self.step >= m) {
                return Ok(());
            }
            let epoch = (self.step / per_epoch) as usize;
            let batches = make_batches(seqs, self.config.batch_size, c.n_cls, c.max_word_len, self.config.seed, epoch)?;
            for b in &batches[(self.step % per_epoch) as usize..] {
                if max_steps.is_some_and(|m| self.step >= m) {
                    return Ok(());
                }
                self.train_step(b)?;
            }
            let mean = self.loss_sum / self.loss_count.max(1) as f64;
            self.loss_sum = 0.0;
            self.loss_count = 0;
            on_epoch(self, epoch + 1, mean)?;
        }
        Ok(())
    }

    /// Snapshot of parameters, optimizer moments and counters.
    pub fn checkpoint(&self, per_epoch: u64, meta: serde_json::Value) -> Checkpoint {
        let mut meta = match meta {
            serde_json::Value::Object(m) => m,
            _ => serde_json::Map::new(),
        };
        meta.insert("train".into(), serde_json::to_value(&self.config).unwrap_or_default());
        meta.insert("epoch_loss_sum".into(), self.loss_sum.into());
        meta.insert("epoch_loss_count".into(), self.loss_count.into());
        Checkpoint {
            config: self.model.config().clone(),
            params: self.model.params().to_vec(),
            optimizer: Some(self.opt.state.clone()),
            epoch: (self.step / per_epoch.max(1)) as usize,
            step: self.step,
            rng_state: self.config.seed,
            meta: serde_json::Value::Object(meta),
        }
    }
}

/// Output locations of a training run.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root.join("checkpoints")).map_err(|e| Error::io(root, e))?;
        Ok(RunDir { root: root.to_path_buf() })
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.jsonl")
    }

    pub fn last_checkpoint(&self) -> PathBuf {
        self.root.join("checkpoints").join("last.ckpt")
    }

    pub fn append_metrics(&self, rec: &MetricsRecord) -> Result<()> {
        let path = self.metrics();
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        let line = serde_json::to_string(rec)?;
        writeln!(f, "{line}").map_err(|e| Error::io(&path, e))
    }
}

/// Full training loop: every `eval_every` epochs it evaluates, appends a
/// metrics line and writes `checkpoints/last.ckpt` when `run_dir` is set.
pub fn train(
    trainer: &mut Trainer,
    seqs: &[Sequence],
    run_dir: Option<&RunDir>,
    meta: serde_json::Value,
    mut evaluate: impl FnMut(&Model<f32>) -> Result<ValMetrics>,
) -> Result<Vec<MetricsRecord>> {
    let per_epoch = trainer.steps_per_epoch(seqs);
    let mut records = Vec::new();
    trainer.run(seqs, None, |t, epoch, loss| {
        if epoch % t.config.eval_every != 0 {
            return Ok(());
        }
        let val = evaluate(t.model())?;
        let rec = MetricsRecord {
            epoch,
            step: t.step,
            train_loss: loss,
            val_word_acc: val.val_word_acc,
            val_char_acc: val.val_char_acc,
        };
        if let Some(dir) = run_dir {
            dir.append_metrics(&rec)?;
            t.checkpoint(per_epoch, meta.clone()).save(&dir.last_checkpoint())?;
        }
        records.push(rec);
        Ok(())
    })?;
    Ok(records)
}
