//! Experiment configuration, read from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataio::{BitOrder, FeatureSpec, LayoutSpec};
use crate::distill::DistillConfig;
use crate::error::{Error, Result};
use crate::grid::{ClassId, GridDims, DEFAULT_INVALID_ID};
use crate::hardness::LgaConfig;
use crate::losses::ClassWeights;
use crate::selection::SelectionConfig;

/// Which parts of the training objective are active.
///
/// Global hardness drives the hard block of the selection; without it the
/// selection is uniform. Local hardness weights the selected voxels; without
/// it every weight is 1. `hvm` enables both, and either flag alone enables
/// the refinement loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Toggles {
    pub global_only: bool,
    pub local_only: bool,
    pub hvm: bool,
    pub t_hvm: bool,
    pub distill: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self::preset("full").unwrap()
    }
}

pub const PRESETS: [&str; 7] = [
    "baseline",
    "global_only",
    "local_only",
    "hvm",
    "hvm_thvm",
    "distill_only",
    "full",
];

impl Toggles {
    pub fn off() -> Self {
        Self {
            global_only: false,
            local_only: false,
            hvm: false,
            t_hvm: false,
            distill: false,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        let off = Self::off();
        Ok(match name {
            "baseline" => off,
            "global_only" => Self { global_only: true, ..off },
            "local_only" => Self { local_only: true, ..off },
            "hvm" => Self { hvm: true, ..off },
            "hvm_thvm" => Self {
                hvm: true,
                t_hvm: true,
                ..off
            },
            "distill_only" => Self { distill: true, ..off },
            "full" => Self {
                hvm: true,
                t_hvm: true,
                distill: true,
                ..off
            },
            other => {
                return Err(Error::config(format!(
                    "unknown preset `{other}` (known: {})",
                    PRESETS.join(", ")
                )))
            }
        })
    }

    pub fn student_hvm(&self) -> bool {
        self.hvm || self.global_only || self.local_only
    }

    pub fn use_global(&self) -> bool {
        self.hvm || self.global_only
    }

    pub fn use_local(&self) -> bool {
        self.hvm || self.local_only
    }

    pub fn needs_teacher(&self) -> bool {
        self.t_hvm || self.distill
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub full_dims: [usize; 3],
    pub voxel_size: f64,
    pub num_classes: usize,
    pub invalid_id: ClassId,
    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub layout: LayoutSpec,
    pub features: FeatureSpec,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            full_dims: [64, 64, 8],
            voxel_size: 0.8,
            num_classes: 5,
            invalid_id: DEFAULT_INVALID_ID,
            train_scenes: 4,
            eval_scenes: 2,
            layout: LayoutSpec::default(),
            features: FeatureSpec::default(),
        }
    }
}

impl SceneConfig {
    pub fn full(&self) -> Result<GridDims> {
        let [x, y, z] = self.full_dims;
        GridDims::new(x, y, z, self.voxel_size)
    }

    pub fn coarse(&self) -> Result<GridDims> {
        self.full()?.coarsened(self.features.coarse_factor)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub steps: usize,
    /// Per-class cross-entropy weights; all ones when absent.
    pub class_weights: Option<Vec<f64>>,
    /// Cap N at 1/64 of the coarse voxel count.
    pub auto_scale_n: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            steps: 500,
            class_weights: None,
            auto_scale_n: true,
        }
    }
}

/// Frame files for the codec verbs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Path stems; `<stem>.bin`, `<stem>.label` and `<stem>.invalid` are read.
    pub frames: Vec<PathBuf>,
    /// `raw train` pairs; identity over the classes when absent.
    pub label_map: Option<PathBuf>,
    pub bit_order: BitOrder,
}

/// Sweep lists; an empty list keeps the single configured value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    pub presets: Vec<String>,
    pub n: Vec<usize>,
    pub lambda: Vec<f64>,
    pub t: Vec<f64>,
    pub omega: Vec<f64>,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub scene: SceneConfig,
    pub lga: LgaConfig,
    pub selection: SelectionConfig,
    pub distill: DistillConfig,
    pub train: TrainConfig,
    pub toggles: Toggles,
    pub data: DataConfig,
    pub ablate: AblateConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("runs/default"),
            scene: SceneConfig::default(),
            lga: LgaConfig::default(),
            selection: SelectionConfig::default(),
            distill: DistillConfig::default(),
            train: TrainConfig::default(),
            toggles: Toggles::default(),
            data: DataConfig::default(),
            ablate: AblateConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.scene;
        s.coarse()?;
        if s.num_classes < 2 {
            return Err(Error::config("num_classes must be at least 2"));
        }
        if (s.invalid_id as usize) < s.num_classes {
            return Err(Error::config("invalid_id collides with a class id"));
        }
        if s.features.dim < s.num_classes {
            return Err(Error::config(format!(
                "feature dim {} must be at least num_classes {}",
                s.features.dim, s.num_classes
            )));
        }
        if s.train_scenes == 0 {
            return Err(Error::config("train_scenes must be at least 1"));
        }
        self.lga.validate()?;
        self.selection.validate()?;
        self.distill.validate()?;
        if !(self.train.lr >= 0.0 && self.train.lr.is_finite()) {
            return Err(Error::config(format!("lr must be a finite non-negative number, got {}", self.train.lr)));
        }
        self.class_weights()?;
        for p in &self.ablate.presets {
            Toggles::preset(p)?;
        }
        for &t in &self.ablate.t {
            SelectionConfig { t, ..self.selection.clone() }.validate()?;
        }
        for &omega in &self.ablate.omega {
            SelectionConfig { omega, ..self.selection.clone() }.validate()?;
        }
        for &lambda in &self.ablate.lambda {
            DistillConfig { lambda, ..self.distill.clone() }.validate()?;
        }
        Ok(())
    }

    pub fn class_weights(&self) -> Result<ClassWeights> {
        match &self.train.class_weights {
            None => Ok(ClassWeights::ones(self.scene.num_classes)),
            Some(w) if w.len() != self.scene.num_classes => Err(Error::config(format!(
                "{} class weights for {} classes",
                w.len(),
                self.scene.num_classes
            ))),
            Some(w) => ClassWeights::new(w.clone()),
        }
    }

    /// N after the optional cap at 1/64 of the coarse grid.
    pub fn effective_n(&self) -> Result<usize> {
        let n = self.selection.n;
        if !self.train.auto_scale_n {
            return Ok(n);
        }
        Ok(n.min(self.scene.coarse()?.volume() / 64))
    }
}
