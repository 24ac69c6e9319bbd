//! Dataset directories: one PNG per image plus `manifest.csv` with columns
//! `file,label,tag,tag_x0,tag_y0,tag_x1,tag_y1,entity_x0,entity_y0,entity_x1,entity_y1`
//! (empty cells when there is no tag or entity).

use std::fs;
use std::path::Path;

use image::{ImageBuffer, RgbImage};
use serde::{Deserialize, Serialize};

use super::{BBox, Dataset, Tag, TagAnnotation};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.csv";

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    file: String,
    label: usize,
    tag: Option<char>,
    tag_x0: Option<usize>,
    tag_y0: Option<usize>,
    tag_x1: Option<usize>,
    tag_y1: Option<usize>,
    entity_x0: Option<usize>,
    entity_y0: Option<usize>,
    entity_x1: Option<usize>,
    entity_y1: Option<usize>,
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::format(path, e.to_string())
}

/// Converts an `HxWx3` tensor in `[0,1]` to 8-bit RGB.
pub fn to_rgb8(image: &Tensor) -> Result<RgbImage> {
    let (h, w, c) = image
        .hwc()
        .filter(|&(_, _, c)| c == 3)
        .ok_or_else(|| Error::shape("png", format!("expected HxWx3, got {:?}", image.shape())))?;
    let bytes = image
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    debug_assert_eq!(c, 3);
    Ok(ImageBuffer::from_raw(w as u32, h as u32, bytes).expect("buffer sized from tensor"))
}

pub fn from_rgb8(img: &RgbImage) -> Tensor {
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|&b| b as f64 / 255.0).collect();
    Tensor::new(vec![h as usize, w as usize, 3], data).expect("RGB buffer")
}

pub fn export_dataset(dataset: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let manifest = dir.join(MANIFEST_FILE);
    let mut writer = csv::Writer::from_path(&manifest).map_err(|e| csv_err(&manifest, e))?;
    for i in 0..dataset.len() {
        let file = format!("{i:05}.png");
        to_rgb8(&dataset.images[i])?.save(dir.join(&file))?;
        let tag = dataset.tags[i];
        let ent = dataset.entity_boxes[i];
        writer
            .serialize(Row {
                file,
                label: dataset.labels[i],
                tag: tag.map(|t| t.tag.letter()),
                tag_x0: tag.map(|t| t.bbox.x0),
                tag_y0: tag.map(|t| t.bbox.y0),
                tag_x1: tag.map(|t| t.bbox.x1),
                tag_y1: tag.map(|t| t.bbox.y1),
                entity_x0: ent.map(|b| b.x0),
                entity_y0: ent.map(|b| b.y0),
                entity_x1: ent.map(|b| b.x1),
                entity_y1: ent.map(|b| b.y1),
            })
            .map_err(|e| csv_err(&manifest, e))?;
    }
    writer.flush()?;
    Ok(())
}

fn bbox(parts: [Option<usize>; 4], path: &Path) -> Result<Option<BBox>> {
    match parts {
        [None, None, None, None] => Ok(None),
        [Some(x0), Some(y0), Some(x1), Some(y1)] if x0 < x1 && y0 < y1 => Ok(Some(BBox::new(x0, y0, x1, y1))),
        _ => Err(Error::format(path, format!("malformed bounding box {parts:?}"))),
    }
}

pub fn import_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let manifest = dir.join(MANIFEST_FILE);
    let mut reader = csv::Reader::from_path(&manifest).map_err(|e| csv_err(&manifest, e))?;
    let mut d = Dataset::default();
    for row in reader.deserialize::<Row>() {
        let row = row.map_err(|e| csv_err(&manifest, e))?;
        let img = image::open(dir.join(&row.file))?.to_rgb8();
        let tag_box = bbox([row.tag_x0, row.tag_y0, row.tag_x1, row.tag_y1], &manifest)?;
        let tag = match (row.tag, tag_box) {
            (None, None) => None,
            (Some(c), Some(bbox)) => Some(TagAnnotation {
                tag: Tag::from_letter(c)
                    .ok_or_else(|| Error::format(&manifest, format!("unknown tag `{c}`")))?,
                bbox,
            }),
            _ => return Err(Error::format(&manifest, format!("tag and box disagree for {}", row.file))),
        };
        d.images.push(from_rgb8(&img));
        d.labels.push(row.label);
        d.tags.push(tag);
        d.entity_boxes
            .push(bbox([row.entity_x0, row.entity_y0, row.entity_x1, row.entity_y1], &manifest)?);
    }
    Ok(d)
}

/// Writes an `HxWx3` tensor in `[0,1]` as PNG.
pub fn save_png(image: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    to_rgb8(image)?.save(path)?;
    Ok(())
}

