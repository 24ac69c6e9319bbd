//! Experiment configuration, read from TOML. Every section and field is
//! optional; unknown keys are rejected.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cavlens::attribution::{HeadMode, DEFAULT_IG_STEPS};
use cavlens::baselines::DEFAULT_RUNS;
use cavlens::synthdata::{ConceptSizes, DatasetConfig};
use cavlens::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Filters of the three conv pairs.
    pub widths: [usize; 3],
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { widths: [16, 32, 64] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainConfig {
    /// Layers explained in the validation run; the first one drives the
    /// accuracy/attribution comparison.
    pub layers: Vec<String>,
    pub ig_steps: usize,
    pub top_k: usize,
    pub head: HeadMode,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        Self {
            layers: vec!["conv6".into()],
            ig_steps: DEFAULT_IG_STEPS,
            top_k: 3,
            head: HeadMode::Multiclass,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TcavConfig {
    pub runs: usize,
    pub seed: u64,
}

impl Default for TcavConfig {
    fn default() -> Self {
        Self {
            runs: DEFAULT_RUNS,
            seed: 0,
        }
    }
}

/// Sizes of the secondary measurements recorded in the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChecksConfig {
    /// Swapped-tag images per model used for the step-count comparison.
    pub completeness_images: usize,
    /// Step count compared against `explain.ig_steps`.
    pub fine_steps: usize,
    /// Held-out positives and negatives per concept for map discrimination.
    pub heldout_examples: usize,
    /// Untagged images per class for the Grad-CAM localisation check.
    pub gradcam_images: usize,
    /// Overlay PNGs written per model and concept.
    pub overlays: usize,
}

impl Default for ChecksConfig {
    fn default() -> Self {
        Self {
            completeness_images: 50,
            fine_steps: 3000,
            heldout_examples: 30,
            gradcam_images: 20,
            overlays: 2,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub training: TrainConfig,
    pub concepts: ConceptSizes,
    pub explain: ExplainConfig,
    pub tcav: TcavConfig,
    pub checks: ChecksConfig,
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Laptop-sized run: 32x32 images and a shorter training schedule; all
    /// explanation settings keep their defaults.
    pub fn desk() -> Self {
        Self {
            dataset: DatasetConfig {
                image_size: 32,
                train_per_class: 200,
                holdout_per_class: 100,
                ..DatasetConfig::default()
            },
            training: TrainConfig {
                learning_rate: 0.005,
                epochs: 15,
                ..TrainConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "full" => Ok(Self::default()),
            other => bail!("unknown preset `{other}` (expected `desk` or `full`)"),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.training.validate()?;
        if self.explain.layers.is_empty() {
            bail!("explain.layers must name at least one layer");
        }
        if self.explain.ig_steps < 2 || self.checks.fine_steps < 2 {
            bail!("integrated gradients need at least 2 steps");
        }
        if self.explain.top_k == 0 {
            bail!("explain.top_k must be positive");
        }
        if self.tcav.runs < 2 {
            bail!("tcav.runs must be at least 2");
        }
        if self.dataset.swapped_per_class == 0 || self.dataset.holdout_per_class == 0 {
            bail!("holdout and swapped sets must be non-empty");
        }
        if self.model.widths.contains(&0) {
            bail!("model.widths must be positive");
        }
        Ok(())
    }
}
