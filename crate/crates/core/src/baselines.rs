//! TCAV scores and their significance against random-direction scores.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cav::{compute_cav, Cav};
use crate::error::{Error, Result};
use crate::exec;
use crate::model::Model;
use crate::stats;
use crate::tensor::Tensor;

pub const DEFAULT_RUNS: usize = 10;
pub const SIGNIFICANCE_LEVEL: f64 = 0.05;

/// Logit gradients of `class_index` at `layer` for each image.
pub fn class_gradients(model: &Model, images: &[Tensor], layer: &str, class_index: usize) -> Result<Vec<Tensor>> {
    if images.is_empty() {
        return Err(Error::Empty("class image set"));
    }
    model.check_class(class_index)?;
    model.check_explainable(layer)?;
    exec::try_map_slice(images, |img| model.logit_gradients(img, layer, class_index))
}

/// Fraction of gradients whose dot product with `direction` is strictly
/// positive.
pub fn score_from_gradients(gradients: &[Tensor], direction: &Tensor) -> Result<f64> {
    if gradients.is_empty() {
        return Err(Error::Empty("gradient set"));
    }
    let mut positive = 0usize;
    for g in gradients {
        if g.shape() != direction.shape() {
            return Err(Error::shape(
                "tcav",
                format!("gradient {:?} vs CAV {:?}", g.shape(), direction.shape()),
            ));
        }
        if g.dot(direction)? > 0.0 {
            positive += 1;
        }
    }
    Ok(positive as f64 / gradients.len() as f64)
}

pub fn tcav_score(model: &Model, class_images: &[Tensor], cav: &Cav, class_index: usize) -> Result<f64> {
    let grads = class_gradients(model, class_images, &cav.layer, class_index)?;
    score_from_gradients(&grads, &cav.direction)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TcavResult {
    pub concept: String,
    pub class_index: usize,
    pub layer: String,
    /// Mean score over the concept runs.
    pub score: f64,
    pub p_value: f64,
    pub n_runs: usize,
    pub significant: bool,
    pub concept_scores: Vec<f64>,
    pub null_scores: Vec<f64>,
}

/// Significance test on precomputed quantities.
///
/// Each run draws two disjoint pools `A`, `B` of `m = min(#positives,
/// #negatives / 2)` negatives and an `m`-subset of positives, then scores a
/// concept CAV (positives against `B`) and a null CAV (`A` against `B`).
/// Pools are redrawn per run so the null scores are independent; a shared
/// reference pool would tie every null CAV to that pool's composition. The
/// two score samples are compared with Welch's two-sided t-test.
#[allow(clippy::too_many_arguments)]
pub fn significance_from_parts(
    concept: &str,
    layer: &str,
    class_index: usize,
    gradients: &[Tensor],
    positives: &[Tensor],
    negatives: &[Tensor],
    n_runs: usize,
    seed: u64,
) -> Result<TcavResult> {
    if n_runs < 2 {
        return Err(Error::Config(format!("significance testing needs at least 2 runs, got {n_runs}")));
    }
    let m = positives.len().min(negatives.len() / 2);
    if m < 2 {
        return Err(Error::InsufficientData(format!(
            "{} positives and {} negatives cannot form two pools of at least 2",
            positives.len(),
            negatives.len(),
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws: Vec<(Vec<usize>, Vec<usize>)> = (0..n_runs)
        .map(|_| {
            let mut neg: Vec<usize> = (0..negatives.len()).collect();
            neg.shuffle(&mut rng);
            neg.truncate(2 * m);
            let mut pos: Vec<usize> = (0..positives.len()).collect();
            pos.shuffle(&mut rng);
            pos.truncate(m);
            (pos, neg)
        })
        .collect();
    let pick = |set: &[Tensor], idx: &[usize]| -> Vec<Tensor> { idx.iter().map(|&i| set[i].clone()).collect() };

    let runs = exec::try_map_range(n_runs, |r| {
        let (pos, neg) = &draws[r];
        let reference = pick(negatives, &neg[..m]);
        let negs = pick(negatives, &neg[m..]);
        let concept_cav = compute_cav(layer, concept, &pick(positives, pos), &negs)?;
        let null_cav = compute_cav(layer, "random", &reference, &negs)?;
        Ok::<_, Error>((
            score_from_gradients(gradients, &concept_cav.direction)?,
            score_from_gradients(gradients, &null_cav.direction)?,
        ))
    })?;
    let (concept_scores, null_scores): (Vec<f64>, Vec<f64>) = runs.into_iter().unzip();
    let test = stats::welch_t_test(&concept_scores, &null_scores)?;
    Ok(TcavResult {
        concept: concept.to_string(),
        class_index,
        layer: layer.to_string(),
        score: stats::mean(&concept_scores),
        p_value: test.p,
        n_runs,
        significant: test.p <= SIGNIFICANCE_LEVEL,
        concept_scores,
        null_scores,
    })
}

/// TCAV score with a significance test against random CAVs. See
/// [`significance_from_parts`] for the resampling scheme.
#[allow(clippy::too_many_arguments)]
pub fn tcav_significance(
    model: &Model,
    class_images: &[Tensor],
    concept: &str,
    positive_images: &[Tensor],
    negative_images: &[Tensor],
    layer: &str,
    class_index: usize,
    n_runs: usize,
    seed: u64,
) -> Result<TcavResult> {
    let grads = class_gradients(model, class_images, layer, class_index)?;
    let pos = crate::cav::collect_activations(model, positive_images, layer)?;
    let neg = crate::cav::collect_activations(model, negative_images, layer)?;
    significance_from_parts(concept, layer, class_index, &grads, &pos, &neg, n_runs, seed)
}
