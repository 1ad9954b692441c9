//! Checkpoint directories.
//!
//! ```text
//! <run>/checkpoints/epoch-0003/      state after epoch index 3 finished
//! <run>/checkpoints/step-000150/     state when a step cap stopped mid-epoch
//!     model.safetensors   all model tensors (heads and running stats included)
//!     model.json          ModelConfig, enough to rebuild the network
//!     optimizer.safetensors  momentum buffers
//!     state.json          counters, sampler and augmentation RNG, config hashes
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::SamplerState;
use crate::error::{Error, Result};
use crate::model::{Mgn, ModelConfig};

pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const MODEL_FILE: &str = "model.safetensors";
pub const MODEL_CONFIG_FILE: &str = "model.json";
pub const OPTIMIZER_FILE: &str = "optimizer.safetensors";
pub const STATE_FILE: &str = "state.json";
const STATE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingState {
    pub version: u32,
    /// Epoch the checkpoint was taken in (0-based).
    pub epoch: usize,
    /// Whether that epoch had finished.
    pub epoch_complete: bool,
    /// Optimizer steps taken so far.
    pub step: usize,
    pub sampler: SamplerState,
    pub augment_rng: ChaCha8Rng,
    /// Hash of the training configuration.
    pub config_hash: String,
    /// Hash of the model architecture.
    pub model_hash: String,
}

/// A checkpoint directory on disk.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub dir: PathBuf,
    pub state: TrainingState,
    pub model_config: ModelConfig,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

impl Checkpoint {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        if !dir.join(MODEL_FILE).is_file() {
            return Err(Error::Data(format!("{} is not a checkpoint directory", dir.display())));
        }
        let state: TrainingState = read_json(&dir.join(STATE_FILE))?;
        if state.version != STATE_VERSION {
            return Err(Error::Data(format!(
                "checkpoint state version {} is not supported",
                state.version
            )));
        }
        let model_config = read_json(&dir.join(MODEL_CONFIG_FILE))?;
        Ok(Checkpoint {
            dir,
            state,
            model_config,
        })
    }

    pub fn model_path(&self) -> PathBuf {
        self.dir.join(MODEL_FILE)
    }

    pub fn optimizer_path(&self) -> PathBuf {
        self.dir.join(OPTIMIZER_FILE)
    }

    /// Rebuilds the network (without classifier heads) and loads weights.
    pub fn load_model(&self) -> Result<Mgn> {
        let model = crate::model::build_model(&self.model_config)?;
        model.params().load(&self.model_path())?;
        Ok(model)
    }

    /// Short content hash of the weights file.
    pub fn weights_hash(&self) -> Result<String> {
        use sha2::{Digest, Sha256};
        let path = self.model_path();
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        Ok(hex::encode(Sha256::digest(&bytes))[..16].to_string())
    }
}

pub(crate) fn checkpoint_name(state: &TrainingState) -> String {
    if state.epoch_complete {
        format!("epoch-{:04}", state.epoch)
    } else {
        format!("step-{:06}", state.step)
    }
}

pub(crate) fn save_checkpoint(
    run_dir: &Path,
    model: &Mgn,
    optimizer: &super::Sgd,
    state: &TrainingState,
) -> Result<PathBuf> {
    let dir = run_dir.join(CHECKPOINT_DIR).join(checkpoint_name(state));
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    model.params().save(&dir.join(MODEL_FILE))?;
    write_json(&dir.join(MODEL_CONFIG_FILE), model.config())?;
    optimizer.save(&dir.join(OPTIMIZER_FILE))?;
    write_json(&dir.join(STATE_FILE), state)?;
    Ok(dir)
}

/// Checkpoints of a run, oldest first by step.
pub fn list_checkpoints(run_dir: &Path) -> Result<Vec<Checkpoint>> {
    let root = run_dir.join(CHECKPOINT_DIR);
    if !root.is_dir() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(&root).map_err(|e| Error::io(&root, e))? {
        let path = entry.map_err(|e| Error::io(&root, e))?.path();
        if path.join(STATE_FILE).is_file() {
            out.push(Checkpoint::open(&path)?);
        }
    }
    out.sort_by_key(|c| (c.state.step, c.state.epoch_complete));
    Ok(out)
}

pub fn latest_checkpoint(run_dir: &Path) -> Result<Option<Checkpoint>> {
    Ok(list_checkpoints(run_dir)?.pop())
}

/// Deletes all but the newest `keep` checkpoints.
pub(crate) fn prune_checkpoints(run_dir: &Path, keep: usize) -> Result<()> {
    let all = list_checkpoints(run_dir)?;
    let excess = all.len().saturating_sub(keep);
    for c in &all[..excess] {
        fs::remove_dir_all(&c.dir).map_err(|e| Error::io(&c.dir, e))?;
    }
    Ok(())
}
