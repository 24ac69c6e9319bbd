//! Procedurally generated three-class datasets with stamped tags whose
//! locations are known exactly.
//!
//! Every image is drawn from its own ChaCha stream derived from
//! `(seed, stream, index)`, so datasets are reproducible bit-for-bit and
//! splits never share a stream.

mod io;
mod render;
mod tag;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use io::{export_dataset, from_rgb8, import_dataset, save_png, to_rgb8, MANIFEST_FILE};
pub use render::{render_entity, render_noise};
pub use tag::{apply_tag, apply_tag_avoiding, reserved_color_distance, Tag, TagAnnotation, TagSpec};

use crate::error::{Error, Result};
use crate::exec;
use crate::tensor::Tensor;

/// Axis-aligned pixel box, `x1`/`y1` exclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Self {
        debug_assert!(x0 < x1 && y0 < y1);
        Self { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    pub fn union(&self, other: &BBox) -> BBox {
        BBox::new(
            self.x0.min(other.x0),
            self.y0.min(other.y0),
            self.x1.max(other.x1),
            self.y1.max(other.y1),
        )
    }
}

/// The three entity classes, in label order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Entity {
    Cucumber,
    Taxi,
    Zebra,
}

impl Entity {
    pub const ALL: [Entity; 3] = [Entity::Cucumber, Entity::Taxi, Entity::Zebra];

    pub fn label(self) -> usize {
        self as usize
    }

    pub fn from_label(label: usize) -> Option<Entity> {
        Entity::ALL.get(label).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Entity::Cucumber => "cucumber",
            Entity::Taxi => "taxi",
            Entity::Zebra => "zebra",
        }
    }

    /// Tag stamped on this class in training sets.
    pub fn canonical_tag(self) -> Tag {
        match self {
            Entity::Cucumber => Tag::C,
            Entity::Taxi => Tag::T,
            Entity::Zebra => Tag::Z,
        }
    }

    /// Tag stamped on this class in the swapped-tag test set.
    pub fn swapped_tag(self) -> Tag {
        match self {
            Entity::Cucumber => Tag::T,
            Entity::Taxi => Tag::Z,
            Entity::Zebra => Tag::C,
        }
    }

    /// The class whose canonical tag is `tag`.
    pub fn owning(tag: Tag) -> Entity {
        match tag {
            Tag::C => Entity::Cucumber,
            Tag::T => Entity::Taxi,
            Tag::Z => Entity::Zebra,
        }
    }
}

pub fn class_names() -> Vec<String> {
    Entity::ALL.iter().map(|e| e.name().to_string()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub image_size: usize,
    pub train_per_class: usize,
    pub holdout_per_class: usize,
    pub swapped_per_class: usize,
    pub tag_fractions: Vec<f64>,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            train_per_class: 600,
            holdout_per_class: 200,
            swapped_per_class: 200,
            tag_fractions: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 {
            return Err(Error::Config(format!("image size {} is below 8", self.image_size)));
        }
        if let Some(p) = self.tag_fractions.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Config(format!("tag fraction {p} outside [0, 1]")));
        }
        if self.train_per_class == 0 {
            return Err(Error::Config("train_per_class must be positive".into()));
        }
        Ok(())
    }
}

/// Images with labels and ground-truth annotations (parallel vectors).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub tags: Vec<Option<TagAnnotation>>,
    /// Entity bounding box, `None` for entity-free images.
    pub entity_boxes: Vec<Option<BBox>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn tagged_count(&self) -> usize {
        self.tags.iter().filter(|t| t.is_some()).count()
    }

    pub fn class_counts(&self, classes: usize) -> Vec<usize> {
        let mut counts = vec![0; classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Indices of the images with label `class`.
    pub fn indices_of(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == class).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            tags: indices.iter().map(|&i| self.tags[i]).collect(),
            entity_boxes: indices.iter().map(|&i| self.entity_boxes[i]).collect(),
        }
    }

    fn push(&mut self, s: Sample) {
        self.images.push(s.image);
        self.labels.push(s.label);
        self.tags.push(s.tag);
        self.entity_boxes.push(s.entity_box);
    }

    fn from_samples(samples: Vec<Sample>) -> Dataset {
        let mut d = Dataset::default();
        for s in samples {
            d.push(s);
        }
        d
    }
}

struct Sample {
    image: Tensor,
    label: usize,
    tag: Option<TagAnnotation>,
    entity_box: Option<BBox>,
}

/// Independent random streams. Never reuse a value for two purposes.
#[derive(Clone, Copy)]
#[repr(u64)]
enum Stream {
    TrainEntity = 1,
    TrainTag = 2,
    TrainSelect = 3,
    Holdout = 4,
    SwappedEntity = 5,
    SwappedTag = 6,
    ConceptEntity = 7,
    ConceptTagBackground = 8,
    ConceptTagNegative = 9,
    ConceptTagStamp = 10,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Per-item generator for `(seed, stream, salt, index)`.
fn item_rng(seed: u64, stream: Stream, salt: u64, index: u64) -> ChaCha8Rng {
    let key = splitmix(splitmix(splitmix(seed) ^ stream as u64) ^ salt.wrapping_mul(0x2545_f491_4f6c_dd1d)) ^ index;
    ChaCha8Rng::seed_from_u64(splitmix(key))
}

fn entity_sample(entity: Entity, size: usize, rng: &mut ChaCha8Rng) -> Sample {
    let (image, bbox) = render_entity(entity, size, rng);
    Sample {
        image,
        label: entity.label(),
        tag: None,
        entity_box: Some(bbox),
    }
}

fn stamp(mut s: Sample, tag: Tag, rng: &mut ChaCha8Rng) -> Result<Sample> {
    let (image, bbox) = apply_tag_avoiding(&s.image, &tag.spec(), s.entity_box, rng)?;
    s.image = image;
    s.tag = Some(TagAnnotation { tag, bbox });
    Ok(s)
}

/// Class-major balanced set: `per_class` renders of each entity.
fn entity_set(cfg: &DatasetConfig, stream: Stream, salt: u64, per_class: usize) -> Vec<Sample> {
    let n = per_class * Entity::ALL.len();
    exec::map_range(n, |i| {
        let entity = Entity::ALL[i / per_class.max(1)];
        entity_sample(entity, cfg.image_size, &mut item_rng(cfg.seed, stream, salt, i as u64))
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSplit {
    pub tag_fraction: f64,
    pub dataset: Dataset,
}

/// All datasets of one tag-fraction experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetFamily {
    pub config: DatasetConfig,
    /// One training set per tag fraction, in config order.
    pub train: Vec<TrainSplit>,
    /// Untagged images for accuracy on clean inputs.
    pub holdout: Dataset,
    /// Each class stamped with another class's tag.
    pub swapped: Dataset,
}

/// Training sets for every tag fraction, an untagged holdout, and the
/// swapped-tag test set.
///
/// All training sets share the same base renders; a fraction `p` tags the
/// first `round(p * n)` images of each class in a fixed per-class random
/// order, with placements that do not depend on `p`. Higher fractions
/// therefore tag a superset of the images tagged by lower ones.
pub fn build_family(config: &DatasetConfig) -> Result<DatasetFamily> {
    config.validate()?;
    let per = config.train_per_class;
    let base = entity_set(config, Stream::TrainEntity, 0, per);

    let mut rank = vec![0usize; base.len()];
    for (c, _) in Entity::ALL.iter().enumerate() {
        let mut order: Vec<usize> = (0..per).collect();
        order.shuffle(&mut item_rng(config.seed, Stream::TrainSelect, 0, c as u64));
        for (r, &i) in order.iter().enumerate() {
            rank[c * per + i] = r;
        }
    }
    let tagged_versions: Vec<Sample> = exec::try_map_range(base.len(), |i| {
        let s = &base[i];
        let entity = Entity::from_label(s.label).expect("valid label");
        stamp(
            Sample {
                image: s.image.clone(),
                label: s.label,
                tag: None,
                entity_box: s.entity_box,
            },
            entity.canonical_tag(),
            &mut item_rng(config.seed, Stream::TrainTag, 0, i as u64),
        )
    })?;

    let train = config
        .tag_fractions
        .iter()
        .map(|&p| {
            let quota = (p * per as f64).round() as usize;
            let mut d = Dataset::default();
            for (i, (plain, tagged)) in base.iter().zip(&tagged_versions).enumerate() {
                let src = if rank[i] < quota { tagged } else { plain };
                d.push(Sample {
                    image: src.image.clone(),
                    label: src.label,
                    tag: src.tag,
                    entity_box: src.entity_box,
                });
            }
            TrainSplit {
                tag_fraction: p,
                dataset: d,
            }
        })
        .collect();

    let holdout = Dataset::from_samples(entity_set(config, Stream::Holdout, 0, config.holdout_per_class));
    let swapped_base = entity_set(config, Stream::SwappedEntity, 0, config.swapped_per_class);
    let swapped = exec::try_map_range(swapped_base.len(), |i| {
        let s = &swapped_base[i];
        let entity = Entity::from_label(s.label).expect("valid label");
        stamp(
            Sample {
                image: s.image.clone(),
                label: s.label,
                tag: None,
                entity_box: s.entity_box,
            },
            entity.swapped_tag(),
            &mut item_rng(config.seed, Stream::SwappedTag, 0, i as u64),
        )
    })?;

    Ok(DatasetFamily {
        config: config.clone(),
        train,
        holdout,
        swapped: Dataset::from_samples(swapped),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ConceptKind {
    Entity(Entity),
    Tag(Tag),
}

impl ConceptKind {
    pub const ALL: [ConceptKind; 6] = [
        ConceptKind::Entity(Entity::Cucumber),
        ConceptKind::Entity(Entity::Taxi),
        ConceptKind::Entity(Entity::Zebra),
        ConceptKind::Tag(Tag::C),
        ConceptKind::Tag(Tag::T),
        ConceptKind::Tag(Tag::Z),
    ];

    pub fn id(self) -> String {
        match self {
            ConceptKind::Entity(e) => e.name().to_string(),
            ConceptKind::Tag(t) => format!("tag-{}", t.letter()),
        }
    }

    /// The class this concept is expected to support.
    pub fn associated_class(self) -> usize {
        match self {
            ConceptKind::Entity(e) => e.label(),
            ConceptKind::Tag(t) => Entity::owning(t).label(),
        }
    }
}

impl std::fmt::Display for ConceptKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.id())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConceptSizes {
    pub positives: usize,
    pub negatives: usize,
}

impl Default for ConceptSizes {
    fn default() -> Self {
        Self {
            positives: 120,
            negatives: 500,
        }
    }
}

/// Which draw of example images to produce. Different splits use different
/// random streams and never overlap.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExampleSplit {
    Train,
    Heldout,
}

impl ExampleSplit {
    fn salt(self) -> u64 {
        match self {
            ExampleSplit::Train => 0x7a11,
            ExampleSplit::Heldout => 0x4e1d,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConceptExamples {
    pub concept: ConceptKind,
    pub positives: Vec<Tensor>,
    pub negatives: Vec<Tensor>,
}

/// Positive and negative example images for all six concepts.
///
/// - entity `c`: positives are untagged renders of `c`; negatives are
///   untagged renders of the other two classes, alternating;
/// - tag `t`: positives are noise backgrounds stamped with `t`; negatives are
///   renders of all classes stamped with one of the other two tags.
pub fn concept_example_sets(
    config: &DatasetConfig,
    sizes: ConceptSizes,
    split: ExampleSplit,
) -> Result<Vec<ConceptExamples>> {
    config.validate()?;
    if sizes.positives == 0 || sizes.negatives == 0 {
        return Err(Error::Config("concept example sizes must be positive".into()));
    }
    let salt = split.salt();
    let size = config.image_size;
    let mut out = Vec::new();
    for (ci, entity) in Entity::ALL.into_iter().enumerate() {
        let others: Vec<Entity> = Entity::ALL.into_iter().filter(|&e| e != entity).collect();
        let s = salt ^ ((ci as u64 + 1) * 0x1000);
        let positives = exec::map_range(sizes.positives, |i| {
            render_entity(entity, size, &mut item_rng(config.seed, Stream::ConceptEntity, s, i as u64)).0
        });
        let negatives = exec::map_range(sizes.negatives, |i| {
            let e = others[i % others.len()];
            render_entity(e, size, &mut item_rng(config.seed, Stream::ConceptEntity, s ^ 0x55, i as u64)).0
        });
        out.push(ConceptExamples {
            concept: ConceptKind::Entity(entity),
            positives,
            negatives,
        });
    }
    for (ti, tag) in Tag::ALL.into_iter().enumerate() {
        let others: Vec<Tag> = Tag::ALL.into_iter().filter(|&t| t != tag).collect();
        let s = salt ^ ((ti as u64 + 1) * 0x100_0000);
        let positives = exec::try_map_range(sizes.positives, |i| {
            let bg = render_noise(size, &mut item_rng(config.seed, Stream::ConceptTagBackground, s, i as u64));
            let mut rng = item_rng(config.seed, Stream::ConceptTagStamp, s, i as u64);
            apply_tag(&bg, &tag.spec(), &mut rng).map(|(img, _)| img)
        })?;
        let negatives = exec::try_map_range(sizes.negatives, |i| {
            let entity = Entity::ALL[i % 3];
            let other = others[(i / 3) % others.len()];
            let mut rng = item_rng(config.seed, Stream::ConceptTagNegative, s, i as u64);
            let (img, bbox) = render_entity(entity, size, &mut rng);
            apply_tag_avoiding(&img, &other.spec(), Some(bbox), &mut rng).map(|(img, _)| img)
        })?;
        out.push(ConceptExamples {
            concept: ConceptKind::Tag(tag),
            positives,
            negatives,
        });
    }
    Ok(out)
}
