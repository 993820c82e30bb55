//! Training, evaluation, and ablation drivers.

mod ablate;
mod train;

pub use ablate::{ablate, bridge_grid, depth_grid, AblationRow};
pub use train::{evaluate, train, TrainSummary};

use std::fs;
use std::path::{Path, PathBuf};

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::data::Sequence;
use crate::error::{Error, Result};
use crate::model::{BackboneConfig, LossParams, PoseNetwork};
use crate::nn::ParamStore;
use crate::preproc::{preprocess, PreprocessConfig};
use crate::quat::Pose;

/// Everything a training run needs; mirrors the config file field-for-field.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub dropout: f64,
    pub epochs: usize,
    /// Initial value of the learnable translation balance term.
    pub beta0: f64,
    /// Initial value of the learnable rotation balance term.
    pub gamma0: f64,
    pub seed: u64,
    pub model: BackboneConfig,
    pub preproc: PreprocessConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-5,
            batch_size: 8,
            dropout: 0.1,
            epochs: 300,
            beta0: -3.0,
            gamma0: 0.0,
            seed: 0,
            model: BackboneConfig::default(),
            preproc: PreprocessConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::Config(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        if !self.beta0.is_finite() || !self.gamma0.is_finite() {
            return Err(Error::Config("beta0 and gamma0 must be finite".into()));
        }
        self.model.validate()?;
        self.preproc.validate()?;
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }
}

/// A dataset flattened to tensors: images scaled to [0, 1], positions, and
/// canonical target quaternions, with per-sequence frame ranges retained.
pub struct PreparedData {
    pub images: Tensor,
    pub positions: Tensor,
    pub quats: Tensor,
    pub poses: Vec<Pose>,
    /// `(sequence id, start..end)` ranges into the flat frame order.
    pub ranges: Vec<(String, std::ops::Range<usize>)>,
    pub input_hw: (usize, usize),
}

impl PreparedData {
    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }
}

/// Loads, preprocesses, and tensorizes the sequences. All frames must share
/// one resolution.
pub fn prepare_sequences(
    sequences: &[Sequence],
    preproc: &PreprocessConfig,
    ps: &ParamStore,
) -> Result<PreparedData> {
    if sequences.is_empty() {
        return Err(Error::InvalidInput("no sequences to prepare".into()));
    }
    let mut pixel_rows = Vec::new();
    let mut positions = Vec::new();
    let mut quats = Vec::new();
    let mut poses = Vec::new();
    let mut ranges = Vec::new();
    let mut hw: Option<(usize, usize)> = None;
    for seq in sequences {
        let start = poses.len();
        for rec in &seq.records {
            let frame = preprocess(&rec.load_frame()?, preproc)?;
            let this_hw = (frame.height(), frame.width());
            match hw {
                None => hw = Some(this_hw),
                Some(prev) if prev != this_hw => {
                    return Err(Error::Shape(format!(
                        "mixed frame sizes: {}x{} vs {}x{}",
                        prev.0, prev.1, this_hw.0, this_hw.1
                    )));
                }
                _ => {}
            }
            pixel_rows.extend(frame.values().iter().map(|v| v / 255.0));
            positions.extend_from_slice(&rec.pose.position);
            quats.extend_from_slice(&rec.pose.orientation.as_wxyz());
            poses.push(rec.pose);
        }
        ranges.push((seq.id(), start..poses.len()));
    }
    let (h, w) = hw.expect("at least one non-empty sequence");
    let n = poses.len();
    let device = ps.device();
    Ok(PreparedData {
        images: Tensor::from_vec(pixel_rows, (n, 1, h, w), device)?,
        positions: Tensor::from_vec(positions, (n, 3), device)?,
        quats: Tensor::from_vec(quats, (n, 4), device)?,
        poses,
        ranges,
        input_hw: (h, w),
    })
}

const CHECKPOINT_VERSION: u32 = 1;
const PARAMS_FILE: &str = "params.safetensors";
const META_FILE: &str = "meta.json";

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    version: u32,
    input_height: usize,
    input_width: usize,
    config: TrainConfig,
}

/// Writes `meta.json` plus `params.safetensors` into `dir`.
pub fn save_checkpoint(
    dir: &Path,
    ps: &ParamStore,
    cfg: &TrainConfig,
    input_hw: (usize, usize),
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let meta = CheckpointMeta {
        version: CHECKPOINT_VERSION,
        input_height: input_hw.0,
        input_width: input_hw.1,
        config: cfg.clone(),
    };
    let json = serde_json::to_string_pretty(&meta).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(dir.join(META_FILE), json)?;
    ps.save(dir.join(PARAMS_FILE))
}

/// A restored checkpoint: rebuilt network plus its parameter store.
pub struct LoadedCheckpoint {
    pub config: TrainConfig,
    pub input_hw: (usize, usize),
    pub store: ParamStore,
    pub network: PoseNetwork,
    pub loss_params: LossParams,
}

/// Rebuilds the model from `meta.json` and restores all parameters,
/// including running statistics and the loss balance terms.
pub fn load_checkpoint(dir: &Path) -> Result<LoadedCheckpoint> {
    let meta_path = dir.join(META_FILE);
    if !meta_path.is_file() {
        return Err(Error::MissingAsset(meta_path));
    }
    let meta: CheckpointMeta = serde_json::from_str(&fs::read_to_string(&meta_path)?)
        .map_err(|e| Error::Config(format!("{}: {e}", meta_path.display())))?;
    if meta.version != CHECKPOINT_VERSION {
        return Err(Error::Config(format!(
            "unsupported checkpoint version {}",
            meta.version
        )));
    }
    meta.config.validate()?;
    let input_hw = (meta.input_height, meta.input_width);
    let mut store = ParamStore::new(meta.config.seed);
    let network = PoseNetwork::build(&meta.config.model, meta.config.dropout, input_hw, &mut store)?;
    let loss_params = LossParams::new(&mut store, meta.config.beta0, meta.config.gamma0)?;
    store.load(dir.join(PARAMS_FILE))?;
    Ok(LoadedCheckpoint {
        config: meta.config,
        input_hw,
        store,
        network,
        loss_params,
    })
}

/// The conventional checkpoint location inside a run's output directory.
pub fn checkpoint_dir(out_dir: &Path) -> PathBuf {
    out_dir.join("checkpoint")
}
