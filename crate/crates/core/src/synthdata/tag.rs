use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::BBox;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// The three tag glyphs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Tag {
    C,
    T,
    Z,
}

impl Tag {
    pub const ALL: [Tag; 3] = [Tag::C, Tag::T, Tag::Z];

    pub fn letter(self) -> char {
        match self {
            Tag::C => 'C',
            Tag::T => 'T',
            Tag::Z => 'Z',
        }
    }

    pub fn from_letter(c: char) -> Option<Tag> {
        Tag::ALL.into_iter().find(|t| t.letter() == c.to_ascii_uppercase())
    }

    /// Canonical appearance: Z on purple, T on magenta, C on cyan, white
    /// glyph, side 25%-40% of the image side.
    pub fn spec(self) -> TagSpec {
        let fill = match self {
            Tag::C => [0, 230, 230],
            Tag::T => [255, 0, 255],
            Tag::Z => [110, 20, 160],
        };
        TagSpec {
            tag: self,
            fill,
            glyph: [255, 255, 255],
            min_side_frac: 0.25,
            max_side_frac: 0.40,
        }
    }

    /// 5x5 glyph raster, row-major, `true` = glyph pixel.
    fn glyph(self) -> [[bool; 5]; 5] {
        const X: bool = true;
        const O: bool = false;
        match self {
            Tag::Z => [
                [X, X, X, X, X],
                [O, O, O, X, O],
                [O, O, X, O, O],
                [O, X, O, O, O],
                [X, X, X, X, X],
            ],
            Tag::T => [
                [X, X, X, X, X],
                [O, O, X, O, O],
                [O, O, X, O, O],
                [O, O, X, O, O],
                [O, O, X, O, O],
            ],
            Tag::C => [
                [O, X, X, X, X],
                [X, O, O, O, O],
                [X, O, O, O, O],
                [X, O, O, O, O],
                [O, X, X, X, X],
            ],
        }
    }
}

impl std::fmt::Display for Tag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.letter())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TagSpec {
    pub tag: Tag,
    pub fill: [u8; 3],
    pub glyph: [u8; 3],
    /// Side length range as a fraction of the shorter image side.
    pub min_side_frac: f64,
    pub max_side_frac: f64,
}

impl TagSpec {
    /// Inclusive side range in pixels for an image whose shorter side is
    /// `short`.
    pub fn side_range(&self, short: usize) -> (usize, usize) {
        let lo = ((self.min_side_frac * short as f64).ceil() as usize).max(3);
        let hi = ((self.max_side_frac * short as f64).floor() as usize).max(lo);
        (lo, hi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagAnnotation {
    pub tag: Tag,
    pub bbox: BBox,
}

/// Stamps an opaque square with the tag's glyph at a random position. The
/// returned box is tight to the square; all other pixels are untouched.
pub fn apply_tag(image: &Tensor, spec: &TagSpec, rng: &mut ChaCha8Rng) -> Result<(Tensor, BBox)> {
    apply_tag_avoiding(image, spec, None, rng)
}

/// Like [`apply_tag`], but the position is drawn uniformly from the
/// placements that overlap `avoid` the least.
pub fn apply_tag_avoiding(
    image: &Tensor,
    spec: &TagSpec,
    avoid: Option<BBox>,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, BBox)> {
    let (h, w, c) = image
        .hwc()
        .filter(|&(_, _, c)| c == 3)
        .ok_or_else(|| Error::shape("apply_tag", format!("expected HxWx3, got {:?}", image.shape())))?;
    let (lo, hi) = spec.side_range(h.min(w));
    if lo > h || lo > w {
        return Err(Error::TagDoesNotFit {
            side: lo,
            width: w,
            height: h,
        });
    }
    let side = rng.random_range(lo..=hi.min(h).min(w));
    let overlap = |x0: usize, y0: usize| {
        avoid.map_or(0, |b| {
            let ox = (x0 + side).min(b.x1).saturating_sub(x0.max(b.x0));
            let oy = (y0 + side).min(b.y1).saturating_sub(y0.max(b.y0));
            ox * oy
        })
    };
    let positions: Vec<(usize, usize)> = (0..=h - side)
        .flat_map(|y| (0..=w - side).map(move |x| (x, y)))
        .collect();
    let least = positions.iter().map(|&(x, y)| overlap(x, y)).min().unwrap_or(0);
    let best: Vec<(usize, usize)> = positions.into_iter().filter(|&(x, y)| overlap(x, y) == least).collect();
    let (x0, y0) = best[rng.random_range(0..best.len())];
    let glyph = spec.tag.glyph();
    let inset = (side / 5).max(1);
    let inner = side.saturating_sub(2 * inset).max(1);
    let mut out = image.clone();
    let d = out.data_mut();
    for dy in 0..side {
        for dx in 0..side {
            let in_glyph = dx >= inset
                && dy >= inset
                && dx < inset + inner
                && dy < inset + inner
                && glyph[(dy - inset) * 5 / inner][(dx - inset) * 5 / inner];
            let color = if in_glyph { spec.glyph } else { spec.fill };
            let base = ((y0 + dy) * w + x0 + dx) * c;
            for (ch, &v) in color.iter().enumerate() {
                d[base + ch] = v as f64 / 255.0;
            }
        }
    }
    Ok((out, BBox::new(x0, y0, x0 + side, y0 + side)))
}

/// Euclidean RGB distance from `px` to the nearest reserved tag fill colour.
pub fn reserved_color_distance(px: [f64; 3]) -> f64 {
    Tag::ALL
        .iter()
        .map(|t| {
            let f = t.spec().fill.map(|v| v as f64 / 255.0);
            ((px[0] - f[0]).powi(2) + (px[1] - f[1]).powi(2) + (px[2] - f[2]).powi(2)).sqrt()
        })
        .fold(f64::INFINITY, f64::min)
}
