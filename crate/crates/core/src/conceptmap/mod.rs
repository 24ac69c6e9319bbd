//! Class-independent concept maps: ReLU of the pooled-CAV-weighted sum of
//! feature maps, a normalisation range calibrated from example images, and
//! overlay rendering.

mod overlay;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

pub use overlay::{blend_overlay, colormap, render_overlay, upsample_bilinear, DEFAULT_ALPHA};

use crate::cav::PooledCav;
use crate::error::{Error, Result};
use crate::exec;
use crate::model::Model;
use crate::stats;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptMap {
    pub layer: String,
    /// `HxW`, elementwise nonnegative.
    pub values: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationRange {
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedConceptMap {
    pub layer: String,
    /// `HxW` in `[0, 1]`.
    pub values: Tensor,
}

/// `max(0, sum_k w_k * fmaps[.., .., k])` as an `HxW` tensor. Shared by
/// concept maps and Grad-CAM.
pub fn weighted_map(weights: &[f64], fmaps: &Tensor) -> Result<Tensor> {
    let (h, w, k) = fmaps
        .hwc()
        .ok_or_else(|| Error::shape("concept map", format!("expected HxWxK feature maps, got {:?}", fmaps.shape())))?;
    if weights.len() != k {
        return Err(Error::shape(
            "concept map",
            format!("{} weights for {k} feature maps", weights.len()),
        ));
    }
    let data = fmaps
        .data()
        .chunks_exact(k)
        .map(|px| px.iter().zip(weights).map(|(a, b)| a * b).sum::<f64>().max(0.0))
        .collect();
    Tensor::new(vec![h, w], data)
}

pub fn raw_concept_map(pooled: &PooledCav, fmaps: &Tensor) -> Result<ConceptMap> {
    Ok(ConceptMap {
        layer: pooled.layer.clone(),
        values: weighted_map(&pooled.values, fmaps)?,
    })
}

/// `sum m^2 / sum m`, or 0 for an all-zero map.
pub fn contraharmonic_mean(map: &ConceptMap) -> f64 {
    let s: f64 = map.values.data().iter().sum();
    if s == 0.0 {
        return 0.0;
    }
    map.values.data().iter().map(|v| v * v).sum::<f64>() / s
}

/// Range from per-example concept maps: the upper bound is the median
/// contraharmonic mean over positives, the lower bound the same over
/// negatives.
pub fn calibrate_from_activations(
    pooled: &PooledCav,
    positives: &[Tensor],
    negatives: &[Tensor],
) -> Result<NormalizationRange> {
    if positives.is_empty() {
        return Err(Error::Empty("positive examples"));
    }
    if negatives.is_empty() {
        return Err(Error::Empty("negative examples"));
    }
    let chm = |acts: &[Tensor]| -> Result<Vec<f64>> {
        exec::try_map_slice(acts, |a| Ok(contraharmonic_mean(&raw_concept_map(pooled, a)?)))
    };
    let upper = stats::median(&chm(positives)?);
    let lower = stats::median(&chm(negatives)?);
    if upper <= lower {
        return Err(Error::Calibration {
            layer: pooled.layer.clone(),
            upper,
            lower,
        });
    }
    Ok(NormalizationRange { lower, upper })
}

pub fn calibrate_range(
    model: &Model,
    layer: &str,
    pooled: &PooledCav,
    positive_examples: &[Tensor],
    negative_examples: &[Tensor],
) -> Result<NormalizationRange> {
    if pooled.layer != layer {
        return Err(Error::LayerMismatch(format!(
            "pooled CAV is for `{}`, calibrating `{layer}`",
            pooled.layer
        )));
    }
    let chm = |images: &[Tensor]| -> Result<Vec<f64>> {
        exec::try_map_slice(images, |img| {
            let (_, cap) = model.forward_with_capture(img, &[layer])?;
            Ok(contraharmonic_mean(&raw_concept_map(pooled, &cap[layer])?))
        })
    };
    if positive_examples.is_empty() {
        return Err(Error::Empty("positive examples"));
    }
    if negative_examples.is_empty() {
        return Err(Error::Empty("negative examples"));
    }
    let upper = stats::median(&chm(positive_examples)?);
    let lower = stats::median(&chm(negative_examples)?);
    if upper <= lower {
        return Err(Error::Calibration {
            layer: layer.to_string(),
            upper,
            lower,
        });
    }
    Ok(NormalizationRange { lower, upper })
}

/// Clips to the range and rescales to `[0, 1]`.
pub fn normalize_map(raw: &ConceptMap, range: NormalizationRange) -> Result<NormalizedConceptMap> {
    let NormalizationRange { lower, upper } = range;
    if !(upper > lower) {
        return Err(Error::Calibration {
            layer: raw.layer.clone(),
            upper,
            lower,
        });
    }
    Ok(NormalizedConceptMap {
        layer: raw.layer.clone(),
        values: raw.values.map(|v| (v.clamp(lower, upper) - lower) / (upper - lower)),
    })
}

/// One row per map row, values separated by spaces, full precision.
pub fn map_to_text(map: &Tensor) -> String {
    let w = map.shape().get(1).copied().unwrap_or(1);
    let mut out = String::new();
    for row in map.data().chunks(w) {
        let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        let _ = writeln!(out, "{}", line.join(" "));
    }
    out
}
