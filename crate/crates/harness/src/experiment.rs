//! The tag-fraction validation experiment: train one model per tag fraction,
//! then compare how accuracy, concept attributions and TCAV scores follow the
//! model's reliance on tags.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use cavlens::attribution::{self, AttributionRecord, ConceptProbe};
use cavlens::baselines;
use cavlens::cav::{self, CavArtifact, PooledCav};
use cavlens::conceptmap::{self, NormalizationRange, NormalizedConceptMap};
use cavlens::model::{self, ArchitectureSpec, Model};
use cavlens::synthdata::{self, ConceptExamples, ConceptKind, ConceptSizes, Dataset, Entity, ExampleSplit};
use cavlens::{exec, stats, Error, Tensor};
use sha2::{Digest, Sha256};

use crate::charts::{self, Series};
use crate::config::ExperimentConfig;
use crate::report::*;

/// Slack allowed when comparing an attribution with its logit share.
pub const BOUND_TOLERANCE: f64 = 1e-12;

pub struct RunOutcome {
    pub report: ExperimentReport,
    /// Seconds per stage.
    pub timings: BTreeMap<String, f64>,
}

pub fn model_id(tag_fraction: f64) -> String {
    format!("tag{:03}", (tag_fraction * 100.0).round() as u32)
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 over labels, annotations and pixel values.
pub fn dataset_hash(d: &Dataset) -> String {
    let mut h = Sha256::new();
    let bbox_bytes = |b: Option<synthdata::BBox>| -> Vec<u8> {
        match b {
            Some(b) => [b.x0, b.y0, b.x1, b.y1].iter().flat_map(|v| (*v as u64).to_le_bytes()).collect(),
            None => vec![0xff; 32],
        }
    };
    for i in 0..d.len() {
        h.update((d.labels[i] as u64).to_le_bytes());
        match d.tags[i] {
            Some(t) => {
                h.update([t.tag.letter() as u8]);
                h.update(bbox_bytes(Some(t.bbox)));
            }
            None => h.update([0u8]),
        }
        h.update(bbox_bytes(d.entity_boxes[i]));
        for v in d.images[i].data() {
            h.update(v.to_le_bytes());
        }
    }
    hex(&h.finalize())
}

struct Clock {
    timings: BTreeMap<String, f64>,
}

impl Clock {
    fn stage<T>(&mut self, name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f().with_context(|| format!("stage `{name}` failed"));
        *self.timings.entry(name.to_string()).or_default() += start.elapsed().as_secs_f64();
        out
    }
}

/// A trained concept at one layer.
struct Probe {
    concept: ConceptKind,
    layer: String,
    pooled: PooledCav,
    range: Option<NormalizationRange>,
}

struct ModelRun {
    id: String,
    fraction: f64,
    model: Model,
}

fn layer_refs(layers: &[String]) -> Vec<&str> {
    layers.iter().map(String::as_str).collect()
}

/// Runs the whole experiment. With `out`, checkpoints, CAVs, overlays,
/// tables, charts and the report are written there as stages complete.
pub fn run_validation(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<RunOutcome> {
    cfg.validate()?;
    let mut clock = Clock {
        timings: BTreeMap::new(),
    };
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let sub = |name: &str| -> Result<Option<PathBuf>> {
        match out {
            Some(dir) => {
                let p = dir.join(name);
                std::fs::create_dir_all(&p)?;
                Ok(Some(p))
            }
            None => Ok(None),
        }
    };
    let layers = cfg.explain.layers.clone();
    let primary = layers[0].clone();

    let (family, examples, heldout) = clock.stage("datasets", || {
        let family = synthdata::build_family(&cfg.dataset)?;
        let examples = synthdata::concept_example_sets(&cfg.dataset, cfg.concepts, ExampleSplit::Train)?;
        let n = cfg.checks.heldout_examples;
        let heldout = synthdata::concept_example_sets(
            &cfg.dataset,
            ConceptSizes {
                positives: n,
                negatives: n,
            },
            ExampleSplit::Heldout,
        )?;
        Ok((family, examples, heldout))
    })?;
    let mut dataset_hashes = BTreeMap::new();
    for split in &family.train {
        dataset_hashes.insert(format!("train-{}", model_id(split.tag_fraction)), dataset_hash(&split.dataset));
    }
    dataset_hashes.insert("holdout".into(), dataset_hash(&family.holdout));
    dataset_hashes.insert("swapped".into(), dataset_hash(&family.swapped));

    let class_names = synthdata::class_names();
    let runs: Vec<ModelRun> = clock.stage("training", || {
        let trained = exec::try_map_range(family.train.len(), |i| {
            let split = &family.train[i];
            let arch = ArchitectureSpec::validation_with_widths(cfg.dataset.image_size, class_names.clone(), cfg.model.widths);
            // One seed for every fraction: the models share their
            // initialisation and batch order and differ only in the tags.
            model::train(
                arch,
                &split.dataset.images,
                &split.dataset.labels,
                &family.holdout.images,
                &family.holdout.labels,
                &cfg.training,
            )
            .with_context(|| format!("training the model for tag fraction {}", split.tag_fraction))
        })?;
        Ok(family
            .train
            .iter()
            .zip(trained)
            .map(|(s, model)| ModelRun {
                id: model_id(s.tag_fraction),
                fraction: s.tag_fraction,
                model,
            })
            .collect())
    })?;
    for r in &runs {
        for layer in &layers {
            r.model.check_explainable(layer).context("explain.layers")?;
        }
    }

    let mut checkpoint_hashes = BTreeMap::new();
    let models_dir = sub("models")?;
    for r in &runs {
        let bytes = model::to_bytes(&r.model)?;
        checkpoint_hashes.insert(r.id.clone(), hex(&Sha256::digest(&bytes)));
        if let Some(dir) = &models_dir {
            std::fs::write(dir.join(format!("{}.ckpt", r.id)), &bytes)?;
        }
    }

    let mut models = Vec::new();
    clock.stage("evaluation", || {
        for r in &runs {
            let hold = r.model.evaluate(&family.holdout.images, &family.holdout.labels)?;
            let sw = r.model.evaluate(&family.swapped.images, &family.swapped.labels)?;
            models.push(ModelSummary {
                id: r.id.clone(),
                tag_fraction: r.fraction,
                dataset: format!("train-{}", r.id),
                seed: r.model.metadata.seed,
                epoch_losses: r.model.metadata.epoch_losses.clone(),
                train_accuracy: r.model.metadata.train_accuracy,
                holdout: AccuracyCell {
                    accuracy: hold.accuracy,
                    per_class: hold.per_class_accuracy,
                },
                swapped: AccuracyCell {
                    accuracy: sw.accuracy,
                    per_class: sw.per_class_accuracy,
                },
            });
        }
        Ok(())
    })?;

    let tables_dir = sub("tables")?;
    let mut calibration = Vec::new();
    let mut tcav = Vec::new();
    let mut attributions = Vec::new();
    let mut completeness = Vec::new();
    let mut bounds = BoundsCheck {
        checked: 0,
        violations: 0,
        max_value: 0.0,
        min_slack: f64::INFINITY,
    };
    for r in &runs {
        let cav_dir = sub(&format!("cavs/{}", r.id))?;
        let (probes, cal, tc) = clock.stage("concepts", || {
            concept_stage(cfg, r, &layers, &examples, &family.swapped, cav_dir.as_deref())
        })?;
        calibration.extend(cal);
        tcav.extend(tc);

        let overlay_dir = sub(&format!("overlays/{}", r.id))?;
        let (summaries, records) = clock.stage("attribution", || {
            attribution_stage(cfg, r, &layers, &probes, &family.swapped, overlay_dir.as_deref())
        })?;
        for rec in &records {
            bounds.checked += 1;
            let slack = rec.normalized_delta - rec.value;
            bounds.max_value = bounds.max_value.max(rec.value);
            bounds.min_slack = bounds.min_slack.min(slack);
            if rec.value < 0.0 || rec.value > 1.0 || slack < -BOUND_TOLERANCE {
                bounds.violations += 1;
            }
        }
        if let Some(dir) = &tables_dir {
            write_records(&dir.join(format!("attributions_{}.csv", r.id)), &records)?;
        }
        attributions.extend(summaries);

        completeness.push(clock.stage("completeness", || completeness_stage(cfg, r, &primary, &family.swapped))?);
    }

    let discrimination = clock.stage("discrimination", || {
        let lo = cfg.dataset.tag_fractions.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = cfg.dataset.tag_fractions.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut out = Vec::new();
        for r in runs.iter().filter(|r| r.fraction == lo || r.fraction == hi) {
            for (ex, held) in examples.iter().zip(&heldout) {
                let learned = match ex.concept {
                    ConceptKind::Entity(_) => r.fraction == lo,
                    ConceptKind::Tag(_) => r.fraction == hi,
                };
                out.push(discrimination_entry(r, ex, held, learned)?);
            }
        }
        Ok(out)
    })?;

    let gradcam = clock.stage("gradcam", || {
        let r = runs
            .iter()
            .min_by(|a, b| a.fraction.total_cmp(&b.fraction))
            .expect("at least one model");
        gradcam_entry(cfg, r, &primary, &family.holdout).map(|g| vec![g])
    })?;

    let trends = trends(&class_names, &models, &attributions, &tcav, &primary);
    let mut config = cfg.clone();
    config.output_dir = None;
    let report = ExperimentReport {
        config,
        provenance: Provenance {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            dataset_seed: cfg.dataset.seed,
            training_seed: cfg.training.seed,
            tcav_seed: cfg.tcav.seed,
            dataset_hashes,
            checkpoint_hashes,
        },
        class_names,
        models,
        calibration,
        attributions,
        tcav,
        completeness,
        bounds,
        discrimination,
        gradcam,
        trends,
    };

    if let Some(dir) = out {
        clock.stage("report", || {
            std::fs::write(dir.join(REPORT_FILE), report.to_json()?)?;
            let tables = dir.join("tables");
            report.write_tables(&tables)?;
            write_charts(&report, &dir.join("charts"))
        })?;
        std::fs::write(dir.join(TIMINGS_FILE), serde_json::to_string_pretty(&clock.timings)?)?;
    }
    Ok(RunOutcome {
        report,
        timings: clock.timings,
    })
}

/// Images of class `class` from the swapped-tag set.
fn class_images(set: &Dataset, class: usize) -> Vec<Tensor> {
    set.indices_of(class).into_iter().map(|i| set.images[i].clone()).collect()
}

fn concept_stage(
    cfg: &ExperimentConfig,
    run: &ModelRun,
    layers: &[String],
    examples: &[ConceptExamples],
    swapped: &Dataset,
    cav_dir: Option<&Path>,
) -> Result<(Vec<Probe>, Vec<CalibrationEntry>, Vec<TcavEntry>)> {
    let model = &run.model;
    let mut probes = Vec::new();
    let mut calibration = Vec::new();
    let mut tcav = Vec::new();
    for layer in layers {
        let mut gradients: BTreeMap<usize, Vec<Tensor>> = BTreeMap::new();
        for (ci, ex) in examples.iter().enumerate() {
            let concept = ex.concept.id();
            let pos = cav::collect_activations(model, &ex.positives, layer)?;
            let neg = cav::collect_activations(model, &ex.negatives, layer)?;
            let c = cav::compute_cav(layer, &concept, &pos, &neg)?;
            let pooled = cav::pool_cav(&c)?;
            let inactive = cav::normalize_pooled(&pooled).inactive;
            let (range, lower, upper) = match conceptmap::calibrate_from_activations(&pooled, &pos, &neg) {
                Ok(r) => (Some(r), r.lower, r.upper),
                Err(Error::Calibration { lower, upper, .. }) => (None, lower, upper),
                Err(e) => return Err(e).with_context(|| format!("calibrating {concept} at {layer}")),
            };
            calibration.push(CalibrationEntry {
                model: run.id.clone(),
                concept: concept.clone(),
                layer: layer.clone(),
                lower,
                upper,
                calibrated: range.is_some(),
                inactive,
            });

            let class = ex.concept.associated_class();
            if let std::collections::btree_map::Entry::Vacant(e) = gradients.entry(class) {
                let grads = baselines::class_gradients(model, &class_images(swapped, class), layer, class)?;
                e.insert(grads);
            }
            let seed = cfg.tcav.seed ^ (ci as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
            let t = baselines::significance_from_parts(&concept, layer, class, &gradients[&class], &pos, &neg, cfg.tcav.runs, seed)
                .with_context(|| format!("TCAV for {concept} at {layer}"))?;
            tcav.push(TcavEntry {
                model: run.id.clone(),
                tag_fraction: run.fraction,
                concept: concept.clone(),
                class_index: class,
                layer: layer.clone(),
                score: t.score,
                p_value: t.p_value,
                significant: t.significant,
                concept_scores: t.concept_scores,
                null_scores: t.null_scores,
            });

            if let Some(dir) = cav_dir {
                cav::save(&CavArtifact { cav: c, range }, dir.join(format!("{concept}@{layer}.cav")))?;
            }
            probes.push(Probe {
                concept: ex.concept,
                layer: layer.clone(),
                pooled,
                range,
            });
        }
    }
    Ok((probes, calibration, tcav))
}

/// The image cohort and target class used to summarise a concept on the
/// swapped-tag set: an entity on its own class's images, a tag on the images
/// that carry it, attributed to the class the tag stands for.
fn cohort(concept: ConceptKind, swapped: &Dataset) -> (Vec<usize>, usize, String) {
    match concept {
        ConceptKind::Entity(e) => (swapped.indices_of(e.label()), e.label(), format!("swapped:{}", e.name())),
        ConceptKind::Tag(t) => {
            let idx = (0..swapped.len())
                .filter(|&i| swapped.tags[i].map(|a| a.tag) == Some(t))
                .collect();
            (idx, Entity::owning(t).label(), format!("swapped:tag-{}", t.letter()))
        }
    }
}

fn attribution_stage(
    cfg: &ExperimentConfig,
    run: &ModelRun,
    layers: &[String],
    probes: &[Probe],
    swapped: &Dataset,
    overlay_dir: Option<&Path>,
) -> Result<(Vec<AttributionSummary>, Vec<AttributionRecord>)> {
    let model = &run.model;
    let active: Vec<ConceptProbe> = probes
        .iter()
        .filter_map(|p| p.range.map(|r| ConceptProbe::new(p.concept.id(), p.pooled.clone(), r)))
        .collect();
    let n_overlays = cfg.checks.overlays.min(swapped.len());
    type PerImage = (Vec<AttributionRecord>, Vec<(String, NormalizedConceptMap)>);
    let per_image: Vec<PerImage> = exec::try_map_range(swapped.len(), |i| {
        let label = swapped.labels[i];
        let mut classes = vec![label];
        if let Some(a) = swapped.tags[i] {
            let c = Entity::owning(a.tag).label();
            if c != label {
                classes.push(c);
            }
        }
        let expl = attribution::explain_image(model, &swapped.images[i], &active, &classes, cfg.explain.ig_steps, cfg.explain.head)?;
        let records = attribution::records(&run.id, &format!("swapped-{i:04}"), &expl);
        let maps = if i < n_overlays {
            expl.into_iter().flat_map(|l| l.maps).collect()
        } else {
            Vec::new()
        };
        Ok::<_, Error>((records, maps))
    })?;

    if let Some(dir) = overlay_dir {
        for (i, (_, maps)) in per_image.iter().enumerate().take(n_overlays) {
            for (concept, map) in maps {
                let path = dir.join(format!("swapped-{i:04}_{concept}@{}.png", map.layer));
                conceptmap::render_overlay(&swapped.images[i], map, conceptmap::DEFAULT_ALPHA, path)?;
            }
        }
    }

    let mut summaries = Vec::new();
    for layer in layers {
        for p in probes.iter().filter(|p| &p.layer == layer) {
            let concept = p.concept.id();
            let (idx, class, cohort_name) = cohort(p.concept, swapped);
            let values: Vec<f64> = idx
                .iter()
                .map(|&i| {
                    per_image[i]
                        .0
                        .iter()
                        .find(|r| r.layer == *layer && r.concept == concept && r.class_index == class)
                        .map_or(0.0, |r| r.value)
                })
                .collect();
            summaries.push(AttributionSummary {
                model: run.id.clone(),
                tag_fraction: run.fraction,
                concept,
                class_index: class,
                layer: layer.clone(),
                cohort: cohort_name,
                images: values.len(),
                mean: stats::mean(&values),
                std: stats::std_dev(&values),
                calibrated: p.range.is_some(),
            });
        }
    }
    let records = per_image.into_iter().flat_map(|(r, _)| r).collect();
    Ok((summaries, records))
}

/// Evenly spaced indices `floor(j * n / k)`.
pub fn spread(n: usize, k: usize) -> Vec<usize> {
    let k = k.min(n);
    (0..k).map(|j| j * n / k).collect()
}

fn completeness_stage(cfg: &ExperimentConfig, run: &ModelRun, layer: &str, swapped: &Dataset) -> Result<CompletenessEntry> {
    let idx = spread(swapped.len(), cfg.checks.completeness_images);
    let pairs = exec::try_map_slice(&idx, |&i| {
        let img = &swapped.images[i];
        let top = run.model.predict(img)?;
        let coarse = attribution::layer_ig(&run.model, img, layer, top, cfg.explain.ig_steps)?;
        let fine = attribution::layer_ig(&run.model, img, layer, top, cfg.checks.fine_steps)?;
        Ok::<_, Error>((coarse.relative_residual(), fine.relative_residual()))
    })?;
    let (coarse, fine): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
    let max = |v: &[f64]| v.iter().copied().fold(0.0, f64::max);
    Ok(CompletenessEntry {
        model: run.id.clone(),
        layer: layer.to_string(),
        images: idx.len(),
        coarse_steps: cfg.explain.ig_steps,
        fine_steps: cfg.checks.fine_steps,
        coarse_max: max(&coarse),
        coarse_median: stats::median(&coarse),
        fine_max: max(&fine),
        fine_median: stats::median(&fine),
        coarse,
        fine,
    })
}

/// Concept maps at every explainable layer, calibrated on the training
/// examples and scored on held-out ones. Activations are streamed so only
/// per-layer summaries are kept.
fn discrimination_entry(
    run: &ModelRun,
    examples: &ConceptExamples,
    heldout: &ConceptExamples,
    learned: bool,
) -> Result<DiscriminationEntry> {
    let model = &run.model;
    let concept = examples.concept.id();
    let layers = model.architecture().explainable_layers()?;
    let refs = layer_refs(&layers);
    let pos_mean = cav::mean_activations(model, &examples.positives, &refs)?;
    let neg_mean = cav::mean_activations(model, &examples.negatives, &refs)?;
    let pooled: Vec<PooledCav> = layers
        .iter()
        .map(|l| {
            let c = cav::cav_from_centroids(
                l,
                &concept,
                &pos_mean[l],
                &neg_mean[l],
                (examples.positives.len(), examples.negatives.len()),
            )?;
            cav::pool_cav(&c)
        })
        .collect::<cavlens::Result<_>>()?;

    let per_image = |images: &[Tensor], f: &(dyn Fn(usize, &Tensor) -> cavlens::Result<f64> + Sync)| {
        exec::try_map_slice(images, |img| {
            let (_, cap) = model.forward_with_capture(img, &refs)?;
            layers.iter().enumerate().map(|(li, l)| f(li, &cap[l])).collect::<cavlens::Result<Vec<f64>>>()
        })
    };
    let chm = |li: usize, act: &Tensor| Ok(conceptmap::contraharmonic_mean(&conceptmap::raw_concept_map(&pooled[li], act)?));
    let pos_chm = per_image(&examples.positives, &chm)?;
    let neg_chm = per_image(&examples.negatives, &chm)?;
    let ranges: Vec<Option<NormalizationRange>> = (0..layers.len())
        .map(|li| {
            let upper = stats::median(&pos_chm.iter().map(|v| v[li]).collect::<Vec<_>>());
            let lower = stats::median(&neg_chm.iter().map(|v| v[li]).collect::<Vec<_>>());
            (upper > lower).then_some(NormalizationRange { lower, upper })
        })
        .collect();

    let mean_map = |li: usize, act: &Tensor| -> cavlens::Result<f64> {
        match ranges[li] {
            Some(r) => {
                let m = conceptmap::normalize_map(&conceptmap::raw_concept_map(&pooled[li], act)?, r)?;
                Ok(stats::mean(m.values.data()))
            }
            None => Ok(0.0),
        }
    };
    let held_pos = per_image(&heldout.positives, &mean_map)?;
    let held_neg = per_image(&heldout.negatives, &mean_map)?;
    let per_layer: Vec<LayerDiscrimination> = layers
        .iter()
        .enumerate()
        .map(|(li, l)| LayerDiscrimination {
            layer: l.clone(),
            calibrated: ranges[li].is_some(),
            positive_mean: stats::mean(&held_pos.iter().map(|v| v[li]).collect::<Vec<_>>()),
            negative_mean: stats::mean(&held_neg.iter().map(|v| v[li]).collect::<Vec<_>>()),
        })
        .collect();

    // best = largest positive/negative ratio, compared by cross-multiplying
    // so that a zero negative mean ranks highest
    let best = per_layer
        .iter()
        .filter(|l| l.calibrated && l.positive_mean > 0.0)
        .reduce(|a, b| {
            if b.positive_mean * a.negative_mean > a.positive_mean * b.negative_mean {
                b
            } else {
                a
            }
        });
    let (best_layer, positive_mean, negative_mean) = match best {
        Some(l) => (Some(l.layer.clone()), l.positive_mean, l.negative_mean),
        None => (None, 0.0, 0.0),
    };
    Ok(DiscriminationEntry {
        model: run.id.clone(),
        concept,
        learned,
        best_layer,
        positive_mean,
        negative_mean,
        ratio: (negative_mean > 0.0).then(|| positive_mean / negative_mean),
        layers: per_layer,
    })
}

fn gradcam_entry(cfg: &ExperimentConfig, run: &ModelRun, layer: &str, holdout: &Dataset) -> Result<GradcamEntry> {
    let mut idx = Vec::new();
    for c in 0..run.model.num_classes() {
        idx.extend(holdout.indices_of(c).into_iter().take(cfg.checks.gradcam_images));
    }
    let shares = exec::try_map_slice(&idx, |&i| {
        let img = &holdout.images[i];
        let (h, w, _) = img.hwc().expect("HxWx3 image");
        let map = attribution::gradcam_map(&run.model, img, layer, holdout.labels[i])?;
        let up = conceptmap::upsample_bilinear(&map.values, h, w)?;
        let bbox = holdout.entity_boxes[i].unwrap_or(synthdata::BBox::new(0, 0, w, h));
        let total = up.sum();
        let inside: f64 = (0..h)
            .flat_map(|y| (0..w).map(move |x| (x, y)))
            .filter(|&(x, y)| bbox.contains(x, y))
            .map(|(x, y)| up.data()[y * w + x])
            .sum();
        let area = bbox.area() as f64 / (h * w) as f64;
        Ok::<_, Error>((total > 0.0).then_some((inside / total, area)))
    })?;
    let valid: Vec<(f64, f64)> = shares.into_iter().flatten().collect();
    Ok(GradcamEntry {
        model: run.id.clone(),
        layer: layer.to_string(),
        images: valid.len(),
        mass_in_entity: stats::mean(&valid.iter().map(|v| v.0).collect::<Vec<_>>()),
        box_area: stats::mean(&valid.iter().map(|v| v.1).collect::<Vec<_>>()),
    })
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

/// Each series divided by its maximum, variance per series, averaged.
/// Series whose maximum is not positive are skipped.
pub fn normalized_variance(series: &[Vec<f64>]) -> Option<f64> {
    let vars: Vec<f64> = series
        .iter()
        .filter_map(|s| {
            let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (max > 0.0).then(|| stats::variance(&s.iter().map(|v| v / max).collect::<Vec<_>>()))
        })
        .collect();
    (!vars.is_empty()).then(|| stats::mean(&vars))
}

fn trends(
    class_names: &[String],
    models: &[ModelSummary],
    attributions: &[AttributionSummary],
    tcav: &[TcavEntry],
    layer: &str,
) -> Trends {
    let fractions: Vec<f64> = models.iter().map(|m| m.tag_fraction).collect();
    let swapped_accuracy: BTreeMap<String, Vec<f64>> = class_names
        .iter()
        .enumerate()
        .map(|(c, name)| (name.clone(), models.iter().map(|m| m.swapped.per_class[c]).collect()))
        .collect();
    let series = |get: &dyn Fn(&str) -> Option<f64>| -> Vec<f64> {
        models.iter().map(|m| get(&m.id).unwrap_or(f64::NAN)).collect()
    };
    let mut attribution = BTreeMap::new();
    let mut tcav_series = BTreeMap::new();
    for kind in ConceptKind::ALL {
        let id = kind.id();
        attribution.insert(
            id.clone(),
            series(&|m| {
                attributions
                    .iter()
                    .find(|a| a.model == m && a.concept == id && a.layer == layer)
                    .map(|a| a.mean)
            }),
        );
        tcav_series.insert(
            id.clone(),
            series(&|m| {
                tcav.iter()
                    .find(|t| t.model == m && t.concept == id && t.layer == layer)
                    .map(|t| t.score)
            }),
        );
    }
    let mut tag_fraction_rho = BTreeMap::new();
    let mut entity_accuracy_rho = BTreeMap::new();
    for kind in ConceptKind::ALL {
        let id = kind.id();
        match kind {
            ConceptKind::Tag(_) => {
                tag_fraction_rho.insert(id.clone(), stats::spearman(&fractions, &attribution[&id]).ok().and_then(finite));
            }
            ConceptKind::Entity(e) => {
                let acc = &swapped_accuracy[e.name()];
                entity_accuracy_rho.insert(id.clone(), stats::spearman(&attribution[&id], acc).ok().and_then(finite));
            }
        }
    }
    let below_full: Vec<usize> = (0..models.len()).filter(|&i| fractions[i] < 1.0).collect();
    let entity_series = |m: &BTreeMap<String, Vec<f64>>| -> Vec<Vec<f64>> {
        Entity::ALL
            .iter()
            .map(|e| below_full.iter().map(|&i| m[e.name()][i]).collect())
            .collect()
    };
    Trends {
        layer: layer.to_string(),
        tag_fractions: fractions,
        entity_tcav_normalized_variance: normalized_variance(&entity_series(&tcav_series)),
        entity_attribution_normalized_variance: normalized_variance(&entity_series(&attribution)),
        swapped_accuracy,
        attribution,
        tcav: tcav_series,
        tag_fraction_rho,
        entity_accuracy_rho,
    }
}

fn percent_labels(fractions: &[f64]) -> Vec<String> {
    fractions.iter().map(|f| format!("{}%", (f * 100.0).round())).collect()
}

/// Accuracy, attribution and TCAV charts, all drawn from report values.
pub fn write_charts(report: &ExperimentReport, dir: &Path) -> Result<()> {
    let t = &report.trends;
    let x = percent_labels(&t.tag_fractions);
    let mut acc: Vec<Series> = t
        .swapped_accuracy
        .iter()
        .map(|(name, v)| Series {
            name: format!("{name} (swapped)"),
            values: v.clone(),
        })
        .collect();
    acc.push(Series {
        name: "holdout".into(),
        values: report.models.iter().map(|m| m.holdout.accuracy).collect(),
    });
    charts::line_chart("Accuracy vs tag fraction", "accuracy", &x, &acc, (0.0, 1.0)).save(dir, "accuracy_vs_fraction")?;

    let attr: Vec<Series> = t
        .attribution
        .iter()
        .map(|(name, v)| Series {
            name: name.clone(),
            values: v.clone(),
        })
        .collect();
    let top = attr
        .iter()
        .flat_map(|s| s.values.iter().copied())
        .filter(|v| v.is_finite())
        .fold(0.0, f64::max);
    let y_max = ((top * 10.0).ceil() / 10.0).clamp(0.1, 1.0);
    charts::line_chart(
        &format!("Concept attribution at {} vs tag fraction", t.layer),
        "attribution",
        &x,
        &attr,
        (0.0, y_max),
    )
    .save(dir, "attribution_vs_fraction")?;

    let concepts: Vec<String> = ConceptKind::ALL.iter().map(|k| k.id()).collect();
    let series: Vec<Series> = report
        .models
        .iter()
        .map(|m| Series {
            name: m.id.clone(),
            values: concepts
                .iter()
                .map(|c| report.tcav_entry(&m.id, c, &t.layer).map_or(f64::NAN, |e| e.score))
                .collect(),
        })
        .collect();
    let flags: Vec<Vec<bool>> = concepts
        .iter()
        .map(|c| {
            report
                .models
                .iter()
                .map(|m| report.tcav_entry(&m.id, c, &t.layer).is_some_and(|e| !e.significant))
                .collect()
        })
        .collect();
    charts::bar_chart(
        &format!("TCAV scores at {} (* not significant)", t.layer),
        "score",
        &concepts,
        &series,
        Some(&flags),
        (0.0, 1.0),
    )
    .save(dir, "tcav_scores")?;
    Ok(())
}
