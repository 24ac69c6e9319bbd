//! Command-line interface.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use cavlens::attribution::{self, ConceptProbe};
use cavlens::baselines;
use cavlens::cav::{self, CavArtifact};
use cavlens::conceptmap;
use cavlens::model::{self, ArchitectureSpec, Model};
use cavlens::synthdata::{self, ExampleSplit};
use cavlens::Tensor;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::charts::{self, Series};
use crate::config::ExperimentConfig;
use crate::experiment::{self, model_id};

#[derive(Debug, Parser)]
#[command(name = "cavlens", version, about = "Concept-level explanations for small CNNs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the tagged training sets, holdout, swapped-tag set and concept examples.
    GenerateDataset {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the validation network on one tag fraction.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        fraction: f64,
        /// Checkpoint file to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute and calibrate a CAV from two directories of PNG images.
    ComputeCav {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        layer: String,
        #[arg(long)]
        positives: PathBuf,
        #[arg(long)]
        negatives: PathBuf,
        #[arg(long)]
        concept: Option<String>,
        /// CAV file to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Concept maps and attributions for one image.
    ExplainLocal {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Calibrated CAV files; their layers are the layers explained.
        #[arg(long = "cav", required = true)]
        cavs: Vec<PathBuf>,
        #[arg(long, default_value_t = 3)]
        top_k: usize,
        #[arg(long, default_value_t = attribution::DEFAULT_IG_STEPS)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Attributions averaged over a directory of class images.
    ExplainGlobal {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        images: PathBuf,
        /// Class name or index.
        #[arg(long)]
        class: String,
        #[arg(long = "cav", required = true)]
        cavs: Vec<PathBuf>,
        #[arg(long, default_value_t = attribution::DEFAULT_IG_STEPS)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// TCAV score with a significance test against random CAVs.
    Tcav {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        class: String,
        #[arg(long)]
        layer: String,
        #[arg(long)]
        positives: PathBuf,
        #[arg(long)]
        negatives: PathBuf,
        #[arg(long)]
        concept: Option<String>,
        #[arg(long, default_value_t = baselines::DEFAULT_RUNS)]
        runs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Optional JSON file for the full result.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// The full tag-fraction experiment with report and charts.
    RunValidation {
        #[command(flatten)]
        config: ConfigArgs,
        /// Overrides `output_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML experiment configuration.
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Built-in configuration: `desk` or `full`.
    #[arg(long)]
    pub preset: Option<String>,
}

impl ConfigArgs {
    pub fn load(&self) -> Result<ExperimentConfig> {
        match (&self.config, &self.preset) {
            (Some(p), _) => ExperimentConfig::load(p),
            (None, Some(name)) => ExperimentConfig::preset(name),
            (None, None) => Ok(ExperimentConfig::desk()),
        }
    }
}

/// PNG files of a directory in file-name order.
pub fn load_images(dir: &Path) -> Result<Vec<Tensor>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("no PNG images in {}", dir.display());
    }
    paths
        .iter()
        .map(|p| {
            let img = image::open(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(synthdata::from_rgb8(&img.to_rgb8()))
        })
        .collect()
}

fn load_model(path: &Path) -> Result<Model> {
    model::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn resolve_class(model: &Model, class: &str) -> Result<usize> {
    let names = &model.architecture().class_names;
    if let Some(i) = names.iter().position(|n| n == class) {
        return Ok(i);
    }
    match class.parse::<usize>() {
        Ok(i) if i < names.len() => Ok(i),
        _ => Err(anyhow!("unknown class `{class}` (classes: {})", names.join(", "))),
    }
}

fn load_probes(paths: &[PathBuf]) -> Result<Vec<ConceptProbe>> {
    paths
        .iter()
        .map(|p| {
            let art = cav::load(p).with_context(|| format!("loading CAV {}", p.display()))?;
            let range = art
                .range
                .ok_or_else(|| anyhow!("CAV {} has no calibrated range; concept maps cannot be normalised", p.display()))?;
            Ok(ConceptProbe::new(art.cav.concept.clone(), cav::pool_cav(&art.cav)?, range))
        })
        .collect()
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn stem(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenerateDataset { config, out } => generate_dataset(&config.load()?, &out),
        Command::Train { config, fraction, out } => train(&config.load()?, fraction, &out),
        Command::ComputeCav {
            model,
            layer,
            positives,
            negatives,
            concept,
            out,
        } => {
            let model = load_model(&model)?;
            model.check_explainable(&layer)?;
            let pos_imgs = load_images(&positives)?;
            let neg_imgs = load_images(&negatives)?;
            let concept = concept.unwrap_or_else(|| dir_name(&positives));
            let pos = cav::collect_activations(&model, &pos_imgs, &layer)?;
            let neg = cav::collect_activations(&model, &neg_imgs, &layer)?;
            let c = cav::compute_cav(&layer, &concept, &pos, &neg)?;
            let pooled = cav::pool_cav(&c)?;
            let range = match conceptmap::calibrate_from_activations(&pooled, &pos, &neg) {
                Ok(r) => Some(r),
                Err(e @ cavlens::Error::Calibration { .. }) => {
                    eprintln!("warning: {e}; the CAV is saved without a range");
                    None
                }
                Err(e) => return Err(e.into()),
            };
            cav::save(&CavArtifact { cav: c, range }, &out)?;
            match range {
                Some(r) => println!("{concept}@{layer}: range [{}, {}] -> {}", r.lower, r.upper, out.display()),
                None => println!("{concept}@{layer}: uncalibrated -> {}", out.display()),
            }
            Ok(())
        }
        Command::ExplainLocal {
            model,
            image,
            cavs,
            top_k,
            steps,
            out,
        } => explain_local(&model, &image, &cavs, top_k, steps, &out),
        Command::ExplainGlobal {
            model,
            images,
            class,
            cavs,
            steps,
            out,
        } => explain_global(&model, &images, &class, &cavs, steps, &out),
        Command::Tcav {
            model,
            images,
            class,
            layer,
            positives,
            negatives,
            concept,
            runs,
            seed,
            out,
        } => {
            let model = load_model(&model)?;
            let class = resolve_class(&model, &class)?;
            let concept = concept.unwrap_or_else(|| dir_name(&positives));
            let result = baselines::tcav_significance(
                &model,
                &load_images(&images)?,
                &concept,
                &load_images(&positives)?,
                &load_images(&negatives)?,
                &layer,
                class,
                runs,
                seed,
            )?;
            println!(
                "{concept} -> {} at {layer}: score {:.4}, p = {:.4}{}",
                model.architecture().class_names[class],
                result.score,
                result.p_value,
                if result.significant { "" } else { " (not significant)" }
            );
            if let Some(path) = out {
                std::fs::write(&path, serde_json::to_string_pretty(&result)?)?;
            }
            Ok(())
        }
        Command::RunValidation { config, out } => {
            let cfg = config.load()?;
            let dir = out
                .or_else(|| cfg.output_dir.clone())
                .ok_or_else(|| anyhow!("no output directory: pass --out or set output_dir"))?;
            let outcome = experiment::run_validation(&cfg, Some(&dir))?;
            print_summary(&outcome.report);
            println!("report written to {}", dir.join(crate::report::REPORT_FILE).display());
            Ok(())
        }
    }
}

/// Concept name implied by a positives directory: its own name, or its
/// parent's when it is literally called `positives`.
fn dir_name(p: &Path) -> String {
    let name = |q: &Path| q.file_name().map(|n| n.to_string_lossy().into_owned());
    match name(p) {
        Some(n) if n == "positives" => p.parent().and_then(name).unwrap_or(n),
        Some(n) => n,
        None => "concept".into(),
    }
}

fn generate_dataset(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let family = synthdata::build_family(&cfg.dataset)?;
    let mut hashes = std::collections::BTreeMap::new();
    for split in &family.train {
        let name = format!("train-{}", model_id(split.tag_fraction));
        synthdata::export_dataset(&split.dataset, out.join(&name))?;
        hashes.insert(name, experiment::dataset_hash(&split.dataset));
    }
    synthdata::export_dataset(&family.holdout, out.join("holdout"))?;
    hashes.insert("holdout".to_string(), experiment::dataset_hash(&family.holdout));
    synthdata::export_dataset(&family.swapped, out.join("swapped"))?;
    hashes.insert("swapped".to_string(), experiment::dataset_hash(&family.swapped));
    for (split, sizes, name) in [
        (ExampleSplit::Train, cfg.concepts, "concepts"),
        (
            ExampleSplit::Heldout,
            synthdata::ConceptSizes {
                positives: cfg.checks.heldout_examples,
                negatives: cfg.checks.heldout_examples,
            },
            "concepts-heldout",
        ),
    ] {
        for ex in synthdata::concept_example_sets(&cfg.dataset, sizes, split)? {
            for (kind, imgs) in [("positives", &ex.positives), ("negatives", &ex.negatives)] {
                let dir = out.join(name).join(ex.concept.id()).join(kind);
                std::fs::create_dir_all(&dir)?;
                for (i, img) in imgs.iter().enumerate() {
                    synthdata::save_png(img, dir.join(format!("{i:05}.png")))?;
                }
            }
        }
    }
    std::fs::write(out.join("hashes.json"), serde_json::to_string_pretty(&hashes)?)?;
    for (name, h) in &hashes {
        println!("{name}: {h}");
    }
    Ok(())
}

fn train(cfg: &ExperimentConfig, fraction: f64, out: &Path) -> Result<()> {
    let index = cfg
        .dataset
        .tag_fractions
        .iter()
        .position(|&p| p == fraction)
        .ok_or_else(|| anyhow!("tag fraction {fraction} is not in dataset.tag_fractions {:?}", cfg.dataset.tag_fractions))?;
    let family = synthdata::build_family(&cfg.dataset)?;
    let split = &family.train[index];
    let arch = ArchitectureSpec::validation_with_widths(cfg.dataset.image_size, synthdata::class_names(), cfg.model.widths);
    let tc = cavlens::TrainConfig {
        seed: cfg.training.seed.wrapping_add(index as u64),
        ..cfg.training.clone()
    };
    let m = model::train(
        arch,
        &split.dataset.images,
        &split.dataset.labels,
        &family.holdout.images,
        &family.holdout.labels,
        &tc,
    )?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    model::save(&m, out)?;
    println!(
        "tag fraction {fraction}: train accuracy {:.4}, holdout accuracy {:.4} -> {}",
        m.metadata.train_accuracy,
        m.metadata.val_accuracy,
        out.display()
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct LocalRow {
    layer: String,
    concept: String,
    rank: usize,
    class: String,
    class_index: usize,
    logit: f64,
    attribution: f64,
    normalized_delta: f64,
    relative_residual: f64,
}

fn explain_local(model: &Path, image: &Path, cavs: &[PathBuf], top_k: usize, steps: usize, out: &Path) -> Result<()> {
    let model = load_model(model)?;
    let probes = load_probes(cavs)?;
    let img = synthdata::from_rgb8(
        &image::open(image)
            .with_context(|| format!("reading {}", image.display()))?
            .to_rgb8(),
    );
    let logits = model.logits(&img)?;
    let mut order: Vec<usize> = (0..model.num_classes()).collect();
    order.sort_by(|&a, &b| logits.data()[b].total_cmp(&logits.data()[a]).then(a.cmp(&b)));
    order.truncate(top_k.min(model.num_classes()));
    if order.is_empty() {
        bail!("top-k must be at least 1");
    }
    let layers = attribution::explain_image(&model, &img, &probes, &order, steps, attribution::HeadMode::Multiclass)?;
    std::fs::create_dir_all(out)?;
    let names = &model.architecture().class_names;
    let mut rows = Vec::new();
    for l in &layers {
        for (concept, map) in &l.maps {
            conceptmap::render_overlay(&img, map, conceptmap::DEFAULT_ALPHA, out.join(format!("{}@{}.png", stem(concept), l.layer)))?;
        }
        for a in &l.attributions {
            let ig = l.igs.iter().find(|ig| ig.class_index == a.class_index).expect("IG for every class");
            rows.push(LocalRow {
                layer: l.layer.clone(),
                concept: a.concept.clone(),
                rank: order.iter().position(|&c| c == a.class_index).expect("requested class") + 1,
                class: names[a.class_index].clone(),
                class_index: a.class_index,
                logit: logits.data()[a.class_index],
                attribution: a.value,
                normalized_delta: l.normalized.normalization.normalized[a.class_index],
                relative_residual: ig.relative_residual(),
            });
        }
    }
    write_csv(&out.join("attributions.csv"), &rows)?;
    for r in &rows {
        println!("{:<8} {:<10} #{} {:<10} {:.4}", r.layer, r.concept, r.rank, r.class, r.attribution);
    }
    Ok(())
}

fn explain_global(model: &Path, images: &Path, class: &str, cavs: &[PathBuf], steps: usize, out: &Path) -> Result<()> {
    let model = load_model(model)?;
    let class = resolve_class(&model, class)?;
    let probes = load_probes(cavs)?;
    let imgs = load_images(images)?;
    let global = attribution::global_attribution(&model, &imgs, &probes, class, steps, attribution::HeadMode::Multiclass)?;
    std::fs::create_dir_all(out)?;
    #[derive(Serialize)]
    struct Row<'a> {
        layer: &'a str,
        concept: &'a str,
        class: &'a str,
        images: usize,
        mean: f64,
        std: f64,
    }
    let name = &model.architecture().class_names[class];
    let rows: Vec<Row> = global
        .iter()
        .map(|g| Row {
            layer: &g.layer,
            concept: &g.concept,
            class: name,
            images: g.values.len(),
            mean: g.mean,
            std: g.std,
        })
        .collect();
    write_csv(&out.join("global_attributions.csv"), &rows)?;

    let mut layers: Vec<String> = Vec::new();
    let mut concepts: Vec<String> = Vec::new();
    for g in &global {
        if !layers.contains(&g.layer) {
            layers.push(g.layer.clone());
        }
        if !concepts.contains(&g.concept) {
            concepts.push(g.concept.clone());
        }
    }
    let series: Vec<Series> = concepts
        .iter()
        .map(|c| Series {
            name: c.clone(),
            values: layers
                .iter()
                .map(|l| {
                    global
                        .iter()
                        .find(|g| &g.concept == c && &g.layer == l)
                        .map_or(f64::NAN, |g| g.mean)
                })
                .collect(),
        })
        .collect();
    charts::bar_chart(
        &format!("Mean attribution to {name} over {} images", imgs.len()),
        "attribution",
        &layers,
        &series,
        None,
        (0.0, 1.0),
    )
    .save(out, "global_attributions")?;
    for r in &rows {
        println!("{:<8} {:<10} {:.4} +- {:.4}", r.layer, r.concept, r.mean, r.std);
    }
    Ok(())
}

fn print_summary(report: &crate::report::ExperimentReport) {
    println!("model     holdout  swapped per class");
    for m in &report.models {
        let per: Vec<String> = m.swapped.per_class.iter().map(|v| format!("{v:.3}")).collect();
        println!("{:<9} {:.3}    {}", m.id, m.holdout.accuracy, per.join(" "));
    }
    let t = &report.trends;
    for (k, v) in t.tag_fraction_rho.iter().chain(&t.entity_accuracy_rho) {
        println!("rho {k}: {}", v.map_or("undefined".into(), |v| format!("{v:.3}")));
    }
}
