use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalkit::{calibration_grid, GAMMA_MAX, GAMMA_STEP};
use crate::model::{AblationSwitches, ModelDims};
use crate::nn::AdamConfig;
use crate::objective::LossOptions;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchedulerConfig {
    pub patience: usize,
    pub factor: f64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            patience: 3,
            factor: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub step: f64,
    pub max: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            step: GAMMA_STEP,
            max: GAMMA_MAX,
        }
    }
}

impl GridConfig {
    pub fn points(&self) -> Result<Vec<f64>> {
        calibration_grid(self.step, self.max)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    /// Weight initialization, reused by stage 2.
    pub init: u64,
    /// Batch order.
    pub shuffle: u64,
    /// Dropout masks.
    pub dropout: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage2Init {
    /// Fresh weights from the init seed.
    #[default]
    Reinitialize,
    /// Start from the selected stage-1 weights.
    FromStage1,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage2Lr {
    /// Use the per-epoch rates stage 1 used, including plateau reductions.
    #[default]
    Replay,
    /// Keep the initial rate for every epoch.
    Fixed,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage2Config {
    pub init: Stage2Init,
    pub lr: Stage2Lr,
}

/// Everything that determines a protocol run. Serialized as one JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    pub schema_version: u32,
    /// Archive directory; relative paths resolve against the config file.
    pub archive: PathBuf,
    pub renormalize_features: bool,
    pub dims: ModelDims,
    pub switches: AblationSwitches,
    pub optimizer: AdamConfig,
    pub epochs_stage1: usize,
    pub batch_size: usize,
    pub scheduler: SchedulerConfig,
    pub calibration: GridConfig,
    pub seeds: Seeds,
    /// Treat the text encoding as a constant target in the reconstruction loss.
    pub stop_target_gradient: bool,
    pub stage2: Stage2Config,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            archive: PathBuf::new(),
            renormalize_features: false,
            dims: ModelDims::default(),
            switches: AblationSwitches::default(),
            optimizer: AdamConfig::default(),
            epochs_stage1: 15,
            batch_size: 64,
            scheduler: SchedulerConfig::default(),
            calibration: GridConfig::default(),
            seeds: Seeds::default(),
            stop_target_gradient: false,
            stage2: Stage2Config::default(),
        }
    }
}

/// Published per-dataset settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    VggSound,
    Ucf,
    ActivityNet,
    /// Settings for the default synthetic archive.
    Synthetic,
}

impl Preset {
    pub fn parse(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "vggsound" => Some(Preset::VggSound),
            "ucf" => Some(Preset::Ucf),
            "activitynet" => Some(Preset::ActivityNet),
            "synthetic" => Some(Preset::Synthetic),
            _ => None,
        }
    }
}

impl ProtocolConfig {
    pub fn preset(preset: Preset) -> Self {
        let mut c = Self::default();
        match preset {
            Preset::VggSound | Preset::ActivityNet => {}
            Preset::Ucf => {
                c.optimizer.lr = 7e-5;
                c.epochs_stage1 = 20;
            }
            Preset::Synthetic => {
                // a few hundred samples give only ~7 steps per epoch
                c.optimizer.lr = SYNTHETIC_LR;
            }
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "config schema version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.epochs_stage1 < 1 {
            return Err(Error::Config("epochs_stage1 must be at least 1".into()));
        }
        if !(self.optimizer.lr > 0.0 && self.optimizer.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.optimizer.lr)));
        }
        if self.batch_size < crate::data::MIN_BATCH {
            return Err(Error::Config(format!("batch_size must be at least 2, got {}", self.batch_size)));
        }
        if self.scheduler.patience < 1 || !(self.scheduler.factor > 0.0 && self.scheduler.factor <= 1.0) {
            return Err(Error::Config("scheduler needs patience >= 1 and factor in (0, 1]".into()));
        }
        self.calibration.points()?;
        self.dims.validate()?;
        self.switches.validate()
    }

    pub fn loss_options(&self) -> LossOptions {
        LossOptions {
            terms: self.switches.loss_terms,
            stop_target_gradient: self.stop_target_gradient,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    /// Reads a config file and resolves a relative archive path against it.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut c = Self::from_json(&text)?;
        if c.archive.is_relative() {
            if let Some(dir) = path.parent() {
                c.archive = dir.join(&c.archive);
            }
        }
        Ok(c)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}

/// Learning rate of the synthetic preset.
pub const SYNTHETIC_LR: f64 = 1e-3;
