//! Layer-wise integrated gradients from a zero-activation baseline, logit
//! delta normalisation, masked concept attributions and their aggregation
//! over image cohorts.

use serde::{Deserialize, Serialize};

use crate::cav::{normalize_pooled, NormalizedPooledCav, PooledCav};
use crate::conceptmap::{self, ConceptMap, NormalizationRange, NormalizedConceptMap};
use crate::error::{Error, Result};
use crate::exec;
use crate::model::{Model, Trace};
use crate::stats;
use crate::tensor::{ops, Tensor};

pub const DEFAULT_IG_STEPS: usize = 300;

/// Path points evaluated together before being folded into the running sum.
const STEP_CHUNK: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerIg {
    pub layer: String,
    pub class_index: usize,
    /// `HxWxK`, same shape as the layer's feature maps.
    pub attributions: Tensor,
    /// `logit(x) - logit(zero activations)`.
    pub logit_delta: f64,
    /// `sum(attributions) - logit_delta`.
    pub residual: f64,
    pub steps: usize,
}

impl LayerIg {
    pub fn relative_residual(&self) -> f64 {
        self.residual.abs() / self.logit_delta.abs().max(1e-9)
    }
}

/// Trapezoid weight of grid point `i` out of `steps` points on `[0, 1]`.
fn trapezoid_weight(i: usize, steps: usize) -> f64 {
    let h = 1.0 / (steps - 1) as f64;
    if i == 0 || i == steps - 1 {
        0.5 * h
    } else {
        h
    }
}

/// Integrated gradients at `layer` for several classes, sharing the path
/// evaluations. The path runs from zero-filled feature maps to the traced
/// ones over `steps` evenly spaced points, endpoints included.
pub fn ig_from_trace(trace: &Trace, layer: &str, classes: &[usize], steps: usize) -> Result<Vec<LayerIg>> {
    if steps < 2 {
        return Err(Error::Config(format!("integrated gradients need at least 2 steps, got {steps}")));
    }
    let node = trace.node(layer)?;
    let fmaps = trace.graph.value(node).clone();
    let n_logits = trace.logits().len();
    if let Some(&bad) = classes.iter().find(|&&c| c >= n_logits) {
        return Err(Error::UnknownClass {
            index: bad,
            classes: n_logits,
        });
    }

    let mut avg_grads: Vec<Tensor> = classes.iter().map(|_| Tensor::zeros(fmaps.shape())).collect();
    let mut baseline_logits = None;
    let mut final_logits = None;
    let mut start = 0;
    while start < steps {
        let end = (start + STEP_CHUNK).min(steps);
        let chunk = exec::try_map_range(end - start, |j| {
            let i = start + j;
            let alpha = i as f64 / (steps - 1) as f64;
            let mut g = trace.graph.substitute(node, fmaps.scale(alpha))?;
            let logits = g.value(trace.logits).clone();
            let grads = classes
                .iter()
                .map(|&c| {
                    let s = g.select(trace.logits, c)?;
                    g.backward(s, node)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok::<_, Error>((logits, grads))
        })?;
        for (j, (logits, grads)) in chunk.into_iter().enumerate() {
            let i = start + j;
            let w = trapezoid_weight(i, steps);
            for (acc, g) in avg_grads.iter_mut().zip(&grads) {
                acc.axpy(w, g)?;
            }
            if i == 0 {
                baseline_logits = Some(logits);
            } else if i == steps - 1 {
                final_logits = Some(logits);
            }
        }
        start = end;
    }
    let base = baseline_logits.expect("grid includes alpha = 0");
    let last = final_logits.expect("grid includes alpha = 1");
    classes
        .iter()
        .zip(avg_grads)
        .map(|(&c, avg)| {
            let attributions = fmaps.mul(&avg)?;
            let logit_delta = last.data()[c] - base.data()[c];
            Ok(LayerIg {
                layer: layer.to_string(),
                class_index: c,
                residual: attributions.sum() - logit_delta,
                attributions,
                logit_delta,
                steps,
            })
        })
        .collect()
}

pub fn layer_ig(model: &Model, image: &Tensor, layer: &str, class_index: usize, steps: usize) -> Result<LayerIg> {
    model.check_explainable(layer)?;
    model.check_class(class_index)?;
    let trace = model.trace(image)?;
    Ok(ig_from_trace(&trace, layer, &[class_index], steps)?.remove(0))
}

/// Integrated gradients for every class of the model, in class order.
pub fn layer_ig_all_classes(model: &Model, image: &Tensor, layer: &str, steps: usize) -> Result<Vec<LayerIg>> {
    model.check_explainable(layer)?;
    let trace = model.trace(image)?;
    let classes: Vec<usize> = (0..model.num_classes()).collect();
    ig_from_trace(&trace, layer, &classes, steps)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadMode {
    /// One logit per class; only positive attributions are kept.
    Multiclass,
    /// A single logit; positive parts support the positive class (index 1),
    /// negative parts the negative class (index 0).
    Binary,
}

/// Sign handling of per-class attributions. Returns one nonnegative tensor
/// per class.
pub fn split_and_rectify(igs: &[Tensor], mode: HeadMode) -> Result<Vec<Tensor>> {
    match mode {
        HeadMode::Multiclass => Ok(igs.iter().map(ops::relu).collect()),
        HeadMode::Binary => match igs {
            [single] => Ok(vec![single.map(|v| (-v).max(0.0)), ops::relu(single)]),
            _ => Err(Error::BinaryMode(igs.len())),
        },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitNormalization {
    pub deltas: Vec<f64>,
    /// Min-max rescaled deltas, `n_t`.
    pub normalized: Vec<f64>,
    /// All deltas equal; every `n_t` is 0.
    pub degenerate: bool,
}

/// Min-max normalisation of per-class logit deltas of one image.
pub fn normalize_logit_deltas(deltas: &[f64]) -> Result<LogitNormalization> {
    if deltas.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "logit delta normalisation needs at least 2 classes, got {}",
            deltas.len()
        )));
    }
    let max = deltas.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = deltas.iter().copied().fold(f64::INFINITY, f64::min);
    let degenerate = max == min;
    let normalized = if degenerate {
        vec![0.0; deltas.len()]
    } else {
        deltas.iter().map(|d| (d - min) / (max - min)).collect()
    };
    Ok(LogitNormalization {
        deltas: deltas.to_vec(),
        normalized,
        degenerate,
    })
}

/// Rectified attributions of every class rescaled so that class `t` sums to
/// `n_t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedLayerIg {
    pub layer: String,
    pub per_class: Vec<Tensor>,
    pub normalization: LogitNormalization,
}

/// Turns raw per-class integrated gradients (all classes of one image, in
/// class order, or the single logit in binary mode) into the normalised
/// form used by concept attributions.
pub fn normalize_layer_ig(igs: &[LayerIg], mode: HeadMode) -> Result<NormalizedLayerIg> {
    let first = igs.first().ok_or(Error::Empty("integrated gradients"))?;
    if let Some(other) = igs.iter().find(|ig| ig.layer != first.layer) {
        return Err(Error::LayerMismatch(format!("`{}` and `{}`", first.layer, other.layer)));
    }
    let raw: Vec<Tensor> = igs.iter().map(|ig| ig.attributions.clone()).collect();
    let rectified = split_and_rectify(&raw, mode)?;
    let deltas: Vec<f64> = match mode {
        HeadMode::Multiclass => igs.iter().map(|ig| ig.logit_delta).collect(),
        HeadMode::Binary => vec![-first.logit_delta, first.logit_delta],
    };
    let normalization = normalize_logit_deltas(&deltas)?;
    let per_class = rectified
        .into_iter()
        .zip(&normalization.normalized)
        .map(|(t, &n)| {
            let total = t.sum();
            if total > 0.0 {
                t.scale(n / total)
            } else {
                Tensor::zeros(t.shape())
            }
        })
        .collect();
    Ok(NormalizedLayerIg {
        layer: first.layer.clone(),
        per_class,
        normalization,
    })
}

/// `sum_ij mask_ij * sum_k weights_k * ig_ijk`.
pub fn masked_weighted_sum(mask: &Tensor, weights: &[f64], ig: &Tensor) -> Result<f64> {
    let (h, w, k) = ig
        .hwc()
        .ok_or_else(|| Error::shape("concept attribution", format!("attributions {:?} are not HxWxK", ig.shape())))?;
    if mask.shape() != [h, w] {
        return Err(Error::shape(
            "concept attribution",
            format!("mask {:?} vs attributions {:?}", mask.shape(), ig.shape()),
        ));
    }
    if weights.len() != k {
        return Err(Error::shape(
            "concept attribution",
            format!("{} weights for {k} feature maps", weights.len()),
        ));
    }
    Ok(ig
        .data()
        .chunks_exact(k)
        .zip(mask.data())
        .map(|(px, m)| m * px.iter().zip(weights).map(|(a, b)| a * b).sum::<f64>())
        .sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptAttribution {
    pub concept: String,
    pub class_index: usize,
    pub layer: String,
    pub value: f64,
}

pub fn concept_attribution(
    concept: &str,
    mask: &NormalizedConceptMap,
    weights: &NormalizedPooledCav,
    ig: &NormalizedLayerIg,
    class_index: usize,
) -> Result<ConceptAttribution> {
    if mask.layer != ig.layer || weights.layer != ig.layer {
        return Err(Error::LayerMismatch(format!(
            "mask `{}`, weights `{}`, attributions `{}`",
            mask.layer, weights.layer, ig.layer
        )));
    }
    let t = ig.per_class.get(class_index).ok_or(Error::UnknownClass {
        index: class_index,
        classes: ig.per_class.len(),
    })?;
    Ok(ConceptAttribution {
        concept: concept.to_string(),
        class_index,
        layer: ig.layer.clone(),
        value: masked_weighted_sum(&mask.values, &weights.values, t)?,
    })
}

/// Everything needed to explain one concept at one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptProbe {
    pub concept: String,
    pub pooled: PooledCav,
    pub weights: NormalizedPooledCav,
    pub range: NormalizationRange,
}

impl ConceptProbe {
    pub fn new(concept: impl Into<String>, pooled: PooledCav, range: NormalizationRange) -> Self {
        let weights = normalize_pooled(&pooled);
        Self {
            concept: concept.into(),
            pooled,
            weights,
            range,
        }
    }

    pub fn layer(&self) -> &str {
        &self.pooled.layer
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerExplanation {
    pub layer: String,
    pub igs: Vec<LayerIg>,
    pub normalized: NormalizedLayerIg,
    /// One normalised map per probe at this layer, in probe order.
    pub maps: Vec<(String, NormalizedConceptMap)>,
    pub attributions: Vec<ConceptAttribution>,
}

/// Local explanation of one image: per layer, integrated gradients for all
/// classes (computed once and shared by every concept), concept maps, and
/// the attribution of every probe at that layer to every class in `classes`.
pub fn explain_image(
    model: &Model,
    image: &Tensor,
    probes: &[ConceptProbe],
    classes: &[usize],
    steps: usize,
    mode: HeadMode,
) -> Result<Vec<LayerExplanation>> {
    for &c in classes {
        model.check_class(c)?;
    }
    let mut layers: Vec<&str> = Vec::new();
    for p in probes {
        model.check_explainable(p.layer())?;
        if !layers.contains(&p.layer()) {
            layers.push(p.layer());
        }
    }
    let trace = model.trace(image)?;
    let all: Vec<usize> = match mode {
        HeadMode::Multiclass => (0..model.num_classes()).collect(),
        HeadMode::Binary => {
            if model.num_classes() != 1 {
                return Err(Error::BinaryMode(model.num_classes()));
            }
            vec![0]
        }
    };
    layers
        .into_iter()
        .map(|layer| {
            let igs = ig_from_trace(&trace, layer, &all, steps)?;
            let normalized = normalize_layer_ig(&igs, mode)?;
            let fmaps = trace.activation(layer)?;
            let mut maps = Vec::new();
            let mut attributions = Vec::new();
            for p in probes.iter().filter(|p| p.layer() == layer) {
                let raw = conceptmap::raw_concept_map(&p.pooled, fmaps)?;
                let mask = conceptmap::normalize_map(&raw, p.range)?;
                for &c in classes {
                    attributions.push(concept_attribution(&p.concept, &mask, &p.weights, &normalized, c)?);
                }
                maps.push((p.concept.clone(), mask));
            }
            Ok(LayerExplanation {
                layer: layer.to_string(),
                igs,
                normalized,
                maps,
                attributions,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalAttribution {
    pub concept: String,
    pub class_index: usize,
    pub layer: String,
    pub mean: f64,
    pub std: f64,
    pub values: Vec<f64>,
}

/// Per-image attributions of every probe to `class_index`, averaged over
/// `images`. Images are explained independently; the reduction runs in image
/// order.
pub fn global_attribution(
    model: &Model,
    images: &[Tensor],
    probes: &[ConceptProbe],
    class_index: usize,
    steps: usize,
    mode: HeadMode,
) -> Result<Vec<GlobalAttribution>> {
    if images.is_empty() {
        return Err(Error::Empty("image set"));
    }
    let per_image = exec::try_map_slice(images, |img| {
        let layers = explain_image(model, img, probes, &[class_index], steps, mode)?;
        Ok::<_, Error>(layers.into_iter().flat_map(|l| l.attributions).collect::<Vec<_>>())
    })?;
    let template = &per_image[0];
    Ok(template
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let values: Vec<f64> = per_image.iter().map(|img| img[i].value).collect();
            GlobalAttribution {
                concept: a.concept.clone(),
                class_index,
                layer: a.layer.clone(),
                mean: stats::mean(&values),
                std: stats::std_dev(&values),
                values,
            }
        })
        .collect())
}

/// Grad-CAM: feature maps weighted by their spatially averaged logit
/// gradients, through the same weighted-map routine as concept maps.
pub fn gradcam_map(model: &Model, image: &Tensor, layer: &str, class_index: usize) -> Result<ConceptMap> {
    model.check_class(class_index)?;
    model.check_explainable(layer)?;
    let trace = model.trace(image)?;
    let grads = crate::model::trace_logit_gradient(&trace, layer, class_index)?;
    let weights = ops::gap(&grads)?;
    Ok(ConceptMap {
        layer: layer.to_string(),
        values: conceptmap::weighted_map(weights.data(), trace.activation(layer)?)?,
    })
}

/// One row of a serialised attribution report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionRecord {
    pub model: String,
    pub image: String,
    pub layer: String,
    pub class_index: usize,
    pub concept: String,
    pub value: f64,
    pub residual: f64,
    pub relative_residual: f64,
    pub steps: usize,
    pub logit_delta: f64,
    pub normalized_delta: f64,
    pub degenerate: bool,
}

/// Flattens a local explanation into report rows.
pub fn records(model_id: &str, image_id: &str, layers: &[LayerExplanation]) -> Vec<AttributionRecord> {
    let mut out = Vec::new();
    for l in layers {
        for a in &l.attributions {
            let ig = l.igs.iter().find(|ig| ig.class_index == a.class_index).unwrap_or(&l.igs[0]);
            out.push(AttributionRecord {
                model: model_id.to_string(),
                image: image_id.to_string(),
                layer: l.layer.clone(),
                class_index: a.class_index,
                concept: a.concept.clone(),
                value: a.value,
                residual: ig.residual,
                relative_residual: ig.relative_residual(),
                steps: ig.steps,
                logit_delta: l.normalized.normalization.deltas.get(a.class_index).copied().unwrap_or(f64::NAN),
                normalized_delta: l.normalized.normalization.normalized.get(a.class_index).copied().unwrap_or(0.0),
                degenerate: l.normalized.normalization.degenerate,
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn trapezoid_weights_sum_to_one() {
        for s in [2, 3, 10, 300] {
            let total: f64 = (0..s).map(|i| trapezoid_weight(i, s)).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rectify_examples() {
        let neg = t(&[1, 1, 3], &[-1.0, -2.0, -0.5]);
        let r = split_and_rectify(&[neg], HeadMode::Multiclass).unwrap();
        assert!(r[0].data().iter().all(|&v| v == 0.0));
        let b = split_and_rectify(&[t(&[1, 1, 3], &[2.0, -3.0, 1.0])], HeadMode::Binary).unwrap();
        assert_eq!(b[1].data(), &[2.0, 0.0, 1.0]);
        assert_eq!(b[0].data(), &[0.0, 3.0, 0.0]);
        let three = vec![Tensor::zeros(&[1, 1, 1]); 3];
        assert!(matches!(split_and_rectify(&three, HeadMode::Binary), Err(Error::BinaryMode(3))));
    }

    #[test]
    fn logit_delta_endpoints_and_ties() {
        let n = normalize_logit_deltas(&[3.0, -1.0, 1.0]).unwrap();
        assert_eq!(n.normalized, vec![1.0, 0.0, 0.5]);
        assert!(!n.degenerate);
        let d = normalize_logit_deltas(&[2.0, 2.0]).unwrap();
        assert!(d.degenerate);
        assert_eq!(d.normalized, vec![0.0, 0.0]);
        assert!(normalize_logit_deltas(&[1.0]).is_err());
    }

    fn ig(class: usize, attributions: Tensor, delta: f64) -> LayerIg {
        LayerIg {
            layer: "l".into(),
            class_index: class,
            residual: attributions.sum() - delta,
            attributions,
            logit_delta: delta,
            steps: 2,
        }
    }

    #[test]
    fn rescaled_totals_equal_normalized_deltas() {
        let igs = vec![
            ig(0, t(&[1, 2, 2], &[0.5, -0.2, 1.0, 0.3]), 4.0),
            ig(1, t(&[1, 2, 2], &[0.1, 0.1, -5.0, 0.0]), 1.0),
            ig(2, t(&[1, 2, 2], &[-1.0, -1.0, -1.0, -1.0]), 0.0),
        ];
        let n = normalize_layer_ig(&igs, HeadMode::Multiclass).unwrap();
        assert_eq!(n.normalization.normalized, vec![1.0, 0.25, 0.0]);
        for (c, &target) in n.normalization.normalized.iter().enumerate() {
            assert!((n.per_class[c].sum() - target).abs() < 1e-12);
            assert!(n.per_class[c].data().iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn attribution_hand_cases() {
        let v = masked_weighted_sum(&t(&[1, 1], &[0.5]), &[1.0, 0.5], &t(&[1, 1, 2], &[0.4, 0.2])).unwrap();
        assert!((v - 0.25).abs() < 1e-15);
        let ig = t(&[2, 1, 2], &[0.1, 0.2, 0.3, 0.15]);
        assert_eq!(masked_weighted_sum(&Tensor::zeros(&[2, 1]), &[1.0, 1.0], &ig).unwrap(), 0.0);
        let full = masked_weighted_sum(&Tensor::full(&[2, 1], 1.0), &[1.0, 1.0], &ig).unwrap();
        assert!((full - ig.sum()).abs() < 1e-15);
        assert!(masked_weighted_sum(&Tensor::zeros(&[1, 2]), &[1.0, 1.0], &ig).is_err());
    }

    #[test]
    fn same_mask_different_weights_differ() {
        let ig = t(&[1, 2, 2], &[0.6, 0.0, 0.1, 0.3]);
        let mask = Tensor::full(&[1, 2], 1.0);
        let a = masked_weighted_sum(&mask, &[1.0, 0.0], &ig).unwrap();
        let b = masked_weighted_sum(&mask, &[0.0, 1.0], &ig).unwrap();
        assert!((a - 0.7).abs() < 1e-15 && (b - 0.3).abs() < 1e-15);
    }

    #[test]
    fn layer_mismatch_is_rejected() {
        let mask = NormalizedConceptMap {
            layer: "a".into(),
            values: Tensor::zeros(&[1, 1]),
        };
        let weights = NormalizedPooledCav {
            layer: "b".into(),
            values: vec![1.0],
            inactive: false,
        };
        let n = normalize_layer_ig(
            &[ig(0, Tensor::zeros(&[1, 1, 1]), 1.0), ig(1, Tensor::zeros(&[1, 1, 1]), 0.0)],
            HeadMode::Multiclass,
        )
        .unwrap();
        assert!(matches!(
            concept_attribution("c", &mask, &weights, &n, 0),
            Err(Error::LayerMismatch(_))
        ));
    }
}
