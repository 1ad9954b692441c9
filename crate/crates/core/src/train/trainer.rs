use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::Device;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{prune_checkpoints, save_checkpoint, write_json, Checkpoint, TrainingState};
use super::config::TrainConfig;
use super::optim::Sgd;
use crate::data::{augment_train, load_image, stack_images, Dataset, ImageRecord, PkSampler};
use crate::error::{Error, Result};
use crate::loss::{route_losses, softmax_targets, LossReport};
use crate::model::{LoadReport, Mgn, WeightMapping};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TRAIN_CONFIG_FILE: &str = "train_config.json";

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// 1-based index of the optimizer step.
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub report: LossReport,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub accuracy: Option<f64>,
    pub config_hash: String,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub steps: usize,
    pub history: Vec<StepRecord>,
    pub last_checkpoint: Option<PathBuf>,
}

/// Owns the model, optimizer, sampler and run directory of one training run.
pub struct Trainer {
    config: TrainConfig,
    config_hash: String,
    model: Mgn,
    optimizer: Sgd,
    sampler: PkSampler,
    augment_rng: ChaCha8Rng,
    records: Vec<ImageRecord>,
    run_dir: PathBuf,
    metrics: BufWriter<File>,
    step: usize,
}

impl Trainer {
    /// Fresh run: builds the model for the dataset's identities and
    /// initializes the run directory.
    pub fn new(config: TrainConfig, dataset: &Dataset, run_dir: impl AsRef<Path>) -> Result<Self> {
        let mut trainer = Self::build(config, dataset, run_dir.as_ref(), false)?;
        write_json(&trainer.run_dir.join(TRAIN_CONFIG_FILE), &trainer.config)?;
        trainer.metrics.flush().map_err(|e| Error::io(&trainer.run_dir, e))?;
        Ok(trainer)
    }

    /// Continues a run from one of its checkpoints.
    pub fn resume(
        config: TrainConfig,
        dataset: &Dataset,
        run_dir: impl AsRef<Path>,
        checkpoint: &Checkpoint,
    ) -> Result<Self> {
        let mut trainer = Self::build(config, dataset, run_dir.as_ref(), true)?;
        if checkpoint.state.config_hash != trainer.config_hash {
            return Err(Error::Config(format!(
                "checkpoint {} was written under config {}, current config is {}",
                checkpoint.dir.display(),
                checkpoint.state.config_hash,
                trainer.config_hash
            )));
        }
        trainer.model.params().load(&checkpoint.model_path())?;
        trainer
            .optimizer
            .load(&checkpoint.optimizer_path(), trainer.model.params())?;
        trainer.sampler.restore(checkpoint.state.sampler.clone())?;
        trainer.augment_rng = checkpoint.state.augment_rng.clone();
        trainer.step = checkpoint.state.step;
        log::info!(
            "resumed from {} at step {}, epoch {}",
            checkpoint.dir.display(),
            trainer.step,
            trainer.sampler.epoch()
        );
        Ok(trainer)
    }

    fn build(config: TrainConfig, dataset: &Dataset, run_dir: &Path, append: bool) -> Result<Self> {
        config.validate()?;
        let training = dataset.training_set();
        if training.is_empty() {
            return Err(Error::Data(format!("no training images under {}", dataset.root.display())));
        }
        let labels: Vec<usize> = training.iter().map(|(_, l)| *l).collect();
        let sampler = PkSampler::new(config.sampler, &labels)?;
        let num_classes = dataset.meta.num_identities;

        let mut model_config = config.model.clone();
        if let Some(n) = model_config.num_classes {
            if n != num_classes {
                return Err(Error::Config(format!(
                    "model.num_classes is {n} but the training split has {num_classes} identities"
                )));
            }
        }
        model_config.num_classes = Some(num_classes);
        let mut model = Mgn::new(&model_config, &Device::Cpu)?;
        model.attach_heads(&softmax_targets(&model_config, &config.loss), num_classes)?;

        fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
        let metrics_path = run_dir.join(METRICS_FILE);
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(&metrics_path)
            .map_err(|e| Error::io(&metrics_path, e))?;

        Ok(Trainer {
            config_hash: config.hash(),
            optimizer: Sgd::new(config.momentum, config.weight_decay),
            augment_rng: ChaCha8Rng::seed_from_u64(config.seed),
            records: training.into_iter().map(|(r, _)| r).collect(),
            run_dir: run_dir.to_path_buf(),
            metrics: BufWriter::new(file),
            step: 0,
            model,
            sampler,
            config,
        })
    }

    /// Copies backbone weights from a safetensors archive into the model.
    /// Meant for fresh runs, before the first step.
    pub fn load_pretrained(&mut self, archive: &Path, mapping: &WeightMapping) -> Result<LoadReport> {
        self.model.load_pretrained(archive, mapping)
    }

    pub fn model(&self) -> &Mgn {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// Epoch the next step belongs to.
    pub fn epoch(&self) -> usize {
        self.sampler.epoch()
    }

    pub fn run_dir(&self) -> &Path {
        &self.run_dir
    }

    fn total_steps(&self) -> usize {
        let by_epochs = self.config.epochs * self.sampler.batches_per_epoch();
        self.config.max_steps.map_or(by_epochs, |m| m.min(by_epochs))
    }

    pub fn is_finished(&self) -> bool {
        self.step >= self.total_steps()
    }

    /// Draws a batch, runs forward/backward and updates the parameters.
    pub fn train_step(&mut self) -> Result<StepRecord> {
        let epoch = self.sampler.epoch();
        let lr = super::lr_at(epoch, &self.config)?;
        let batch = self.sampler.next_indices();
        let size = self.config.model.input_size;
        let mut images = Vec::with_capacity(batch.records.len());
        for &i in &batch.records {
            let img = load_image(&self.records[i].image_path, size, &self.model.config().normalization)?;
            images.push(augment_train(img, self.config.flip_prob, &mut self.augment_rng));
        }
        let images = stack_images(&images, self.model.device())?;

        let bundle = self.model.forward_t(&images, true)?;
        let routed = route_losses(&bundle, &batch.labels, self.model.heads(), &self.config.loss)?;
        if let Some(bad) = routed.report.terms.iter().find(|t| !t.value.is_finite()) {
            return Err(Error::NonFiniteLoss {
                term: format!("{} {}", bad.kind, bad.feature),
                value: bad.value,
            });
        }
        let grads = routed.total.backward()?;
        self.optimizer.step(self.model.params(), &grads, lr)?;
        self.step += 1;

        let record = StepRecord {
            step: self.step,
            epoch,
            lr,
            accuracy: routed.report.accuracy(),
            report: routed.report,
            config_hash: self.config_hash.clone(),
        };
        serde_json::to_writer(&mut self.metrics, &record)?;
        writeln!(self.metrics).map_err(|e| Error::io(&self.run_dir, e))?;
        self.metrics.flush().map_err(|e| Error::io(&self.run_dir, e))?;
        Ok(record)
    }

    /// Writes a checkpoint of the current state and prunes old ones.
    pub fn checkpoint(&mut self) -> Result<PathBuf> {
        // The sampler advances its epoch counter right after the last batch
        // of an epoch, so a zero in-epoch position means a finished epoch.
        let finished = self.step > 0 && self.step % self.sampler.batches_per_epoch() == 0;
        let state = TrainingState {
            version: 1,
            epoch: if finished {
                self.sampler.epoch() - 1
            } else {
                self.sampler.epoch()
            },
            epoch_complete: finished,
            step: self.step,
            sampler: self.sampler.state().clone(),
            augment_rng: self.augment_rng.clone(),
            config_hash: self.config_hash.clone(),
            model_hash: self.model.config().hash(),
        };
        let dir = save_checkpoint(&self.run_dir, &self.model, &self.optimizer, &state)?;
        prune_checkpoints(&self.run_dir, self.config.keep_checkpoints)?;
        Ok(dir)
    }

    /// Trains until the epoch budget or step cap is reached, checkpointing
    /// after every epoch and at the end.
    pub fn run(&mut self) -> Result<TrainOutcome> {
        let per_epoch = self.sampler.batches_per_epoch();
        let mut history = Vec::new();
        let mut last_checkpoint = None;
        while !self.is_finished() {
            let record = self.train_step()?;
            log::info!(
                "step {} epoch {} lr {:.2e} loss {:.4} acc {:.3}",
                record.step,
                record.epoch,
                record.lr,
                record.report.total,
                record.accuracy.unwrap_or(f64::NAN)
            );
            history.push(record);
            if self.step % per_epoch == 0 || self.is_finished() {
                last_checkpoint = Some(self.checkpoint()?);
            }
        }
        Ok(TrainOutcome {
            steps: self.step,
            history,
            last_checkpoint,
        })
    }
}

/// Trains a fresh model on `dataset`, writing logs and checkpoints to
/// `run_dir`.
pub fn train(config: TrainConfig, dataset: &Dataset, run_dir: impl AsRef<Path>) -> Result<TrainOutcome> {
    Trainer::new(config, dataset, run_dir)?.run()
}

/// Reads a metrics log back.
pub fn read_metrics(path: &Path) -> Result<Vec<StepRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}
