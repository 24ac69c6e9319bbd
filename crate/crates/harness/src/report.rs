//! The structured report of a validation run and its CSV views.
//!
//! Everything in [`ExperimentReport`] is a deterministic function of the
//! configuration; wall-clock timings live in a separate file.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{Context, Result};
use cavlens::attribution::AttributionRecord;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;

pub const REPORT_FILE: &str = "report.json";
pub const TIMINGS_FILE: &str = "timings.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool_version: String,
    pub dataset_seed: u64,
    pub training_seed: u64,
    pub tcav_seed: u64,
    /// SHA-256 of every generated dataset, keyed by dataset id.
    pub dataset_hashes: BTreeMap<String, String>,
    /// SHA-256 of every saved checkpoint, keyed by model id.
    pub checkpoint_hashes: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyCell {
    pub accuracy: f64,
    pub per_class: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub id: String,
    pub tag_fraction: f64,
    pub dataset: String,
    pub seed: u64,
    pub epoch_losses: Vec<f64>,
    pub train_accuracy: f64,
    pub holdout: AccuracyCell,
    pub swapped: AccuracyCell,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationEntry {
    pub model: String,
    pub concept: String,
    pub layer: String,
    pub lower: f64,
    pub upper: f64,
    /// False when the positive and negative medians did not separate; the
    /// concept is then reported with attribution 0 at this layer.
    pub calibrated: bool,
    /// True when no pooled-CAV channel is positive.
    pub inactive: bool,
}

/// Mean attribution of one concept to one class over an image cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionSummary {
    pub model: String,
    pub tag_fraction: f64,
    pub concept: String,
    pub class_index: usize,
    pub layer: String,
    pub cohort: String,
    pub images: usize,
    pub mean: f64,
    pub std: f64,
    pub calibrated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TcavEntry {
    pub model: String,
    pub tag_fraction: f64,
    pub concept: String,
    pub class_index: usize,
    pub layer: String,
    pub score: f64,
    pub p_value: f64,
    pub significant: bool,
    pub concept_scores: Vec<f64>,
    pub null_scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletenessEntry {
    pub model: String,
    pub layer: String,
    pub images: usize,
    pub coarse_steps: usize,
    pub fine_steps: usize,
    pub coarse_max: f64,
    pub coarse_median: f64,
    pub fine_max: f64,
    pub fine_median: f64,
    /// Relative residual per image at the coarse and fine step counts.
    pub coarse: Vec<f64>,
    pub fine: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundsCheck {
    pub checked: usize,
    pub violations: usize,
    pub max_value: f64,
    pub min_slack: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDiscrimination {
    pub layer: String,
    pub calibrated: bool,
    pub positive_mean: f64,
    pub negative_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminationEntry {
    pub model: String,
    pub concept: String,
    /// Whether the model was trained with this concept predictive of its
    /// class (entities always, tags only at fraction 1).
    pub learned: bool,
    pub best_layer: Option<String>,
    pub positive_mean: f64,
    pub negative_mean: f64,
    /// `None` when the negative mean is zero.
    pub ratio: Option<f64>,
    pub layers: Vec<LayerDiscrimination>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcamEntry {
    pub model: String,
    pub layer: String,
    pub images: usize,
    /// Mean share of the upsampled map that falls inside the entity box.
    pub mass_in_entity: f64,
    /// Mean share of the image covered by the entity box.
    pub box_area: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trends {
    pub layer: String,
    pub tag_fractions: Vec<f64>,
    /// Swapped-tag accuracy per class, one series per class over fractions.
    pub swapped_accuracy: BTreeMap<String, Vec<f64>>,
    /// Mean attribution per concept over fractions.
    pub attribution: BTreeMap<String, Vec<f64>>,
    /// TCAV score per concept over fractions.
    pub tcav: BTreeMap<String, Vec<f64>>,
    /// Spearman rho of tag fraction against each tag's attribution.
    pub tag_fraction_rho: BTreeMap<String, Option<f64>>,
    /// Spearman rho of each entity's attribution against its class's
    /// swapped-tag accuracy.
    pub entity_accuracy_rho: BTreeMap<String, Option<f64>>,
    /// Series divided by their maximum over the models below fraction 1,
    /// variance taken per entity and averaged.
    pub entity_tcav_normalized_variance: Option<f64>,
    pub entity_attribution_normalized_variance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub provenance: Provenance,
    pub class_names: Vec<String>,
    pub models: Vec<ModelSummary>,
    pub calibration: Vec<CalibrationEntry>,
    pub attributions: Vec<AttributionSummary>,
    pub tcav: Vec<TcavEntry>,
    pub completeness: Vec<CompletenessEntry>,
    pub bounds: BoundsCheck,
    pub discrimination: Vec<DiscriminationEntry>,
    pub gradcam: Vec<GradcamEntry>,
    pub trends: Trends,
}

impl ExperimentReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn model(&self, tag_fraction: f64) -> Option<&ModelSummary> {
        self.models.iter().find(|m| m.tag_fraction == tag_fraction)
    }

    pub fn tcav_entry(&self, model: &str, concept: &str, layer: &str) -> Option<&TcavEntry> {
        self.tcav
            .iter()
            .find(|t| t.model == model && t.concept == concept && t.layer == layer)
    }

    pub fn attribution(&self, model: &str, concept: &str, layer: &str) -> Option<&AttributionSummary> {
        self.attributions
            .iter()
            .find(|a| a.model == model && a.concept == concept && a.layer == layer)
    }

    /// Writes the CSV tables next to the report.
    pub fn write_tables(&self, dir: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(dir.join("accuracy.csv"))?;
        w.write_record(["model", "tag_fraction", "set", "class", "accuracy"])?;
        for m in &self.models {
            for (set, cell) in [("holdout", &m.holdout), ("swapped", &m.swapped)] {
                w.write_record([&m.id, &m.tag_fraction.to_string(), set, "all", &cell.accuracy.to_string()])?;
                for (c, acc) in cell.per_class.iter().enumerate() {
                    w.write_record([&m.id, &m.tag_fraction.to_string(), set, &self.class_names[c], &acc.to_string()])?;
                }
            }
        }
        w.flush()?;
        write_rows(&dir.join("attribution_summary.csv"), &self.attributions)?;
        write_rows(&dir.join("calibration.csv"), &self.calibration)?;

        let mut w = csv::Writer::from_path(dir.join("tcav.csv"))?;
        w.write_record(["model", "tag_fraction", "concept", "class", "layer", "score", "p_value", "significant"])?;
        for t in &self.tcav {
            w.write_record([
                t.model.clone(),
                t.tag_fraction.to_string(),
                t.concept.clone(),
                self.class_names[t.class_index].clone(),
                t.layer.clone(),
                t.score.to_string(),
                t.p_value.to_string(),
                t.significant.to_string(),
            ])?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("discrimination.csv"))?;
        w.write_record(["model", "concept", "learned", "layer", "calibrated", "positive_mean", "negative_mean", "best"])?;
        for d in &self.discrimination {
            for l in &d.layers {
                w.write_record([
                    d.model.clone(),
                    d.concept.clone(),
                    d.learned.to_string(),
                    l.layer.clone(),
                    l.calibrated.to_string(),
                    l.positive_mean.to_string(),
                    l.negative_mean.to_string(),
                    (d.best_layer.as_deref() == Some(l.layer.as_str())).to_string(),
                ])?;
            }
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("completeness.csv"))?;
        w.write_record(["model", "layer", "image", "coarse_relative_residual", "fine_relative_residual"])?;
        for c in &self.completeness {
            for (i, (a, b)) in c.coarse.iter().zip(&c.fine).enumerate() {
                w.write_record([c.model.clone(), c.layer.clone(), i.to_string(), a.to_string(), b.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_records(path: &Path, rows: &[AttributionRecord]) -> Result<()> {
    write_rows(path, rows).with_context(|| format!("writing {}", path.display()))
}
