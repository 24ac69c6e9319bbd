//! Procedural entity renderers.
//!
//! Backgrounds are low-saturation noise, entities avoid the hues reserved for
//! tags (cyan, magenta, purple). Grain can push single pixels close to a tag
//! colour, but never a tag-sized patch.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{BBox, Entity};
use crate::tensor::Tensor;

/// RGB float canvas, quantised to 8-bit levels when finished.
#[derive(Debug, Clone)]
pub(crate) struct Canvas {
    pub(crate) size: usize,
    pub(crate) px: Vec<[f64; 3]>,
}

impl Canvas {
    fn new(size: usize) -> Self {
        Self {
            size,
            px: vec![[0.0; 3]; size * size],
        }
    }

    fn set(&mut self, x: usize, y: usize, c: [f64; 3]) {
        self.px[y * self.size + x] = c;
    }

    fn get(&self, x: usize, y: usize) -> [f64; 3] {
        self.px[y * self.size + x]
    }

    pub(crate) fn into_tensor(self) -> Tensor {
        let data = self
            .px
            .iter()
            .flat_map(|c| c.map(quantize))
            .collect();
        Tensor::new(vec![self.size, self.size, 3], data).expect("square RGB canvas")
    }
}

/// Rounds to the nearest 8-bit level so PNG export is lossless.
pub(crate) fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Sensor-like grain added over the finished scene.
const GRAIN_SIGMA: f64 = 0.12;

/// Entity colour shared by all classes so that only shape and texture
/// identify the class. Muted hues in red..green, away from the tag hues.
fn entity_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    hsv(rng.random_range(0.0..150.0), rng.random_range(0.18..0.36), rng.random_range(0.45..0.95))
}

/// Low-saturation noisy background with a few faint blobs.
pub(crate) fn background(size: usize, rng: &mut ChaCha8Rng) -> Canvas {
    let mut c = Canvas::new(size);
    let base = hsv(
        rng.random_range(0.0..360.0),
        rng.random_range(0.0..0.2),
        rng.random_range(0.3..0.75),
    );
    let sigma = rng.random_range(0.03..0.09);
    let noise = Normal::new(0.0, sigma).expect("positive sigma");
    for p in c.px.iter_mut() {
        let n = noise.sample(rng);
        *p = base.map(|b| (b + n).clamp(0.0, 1.0));
    }
    let blobs = rng.random_range(0..4);
    for _ in 0..blobs {
        let color = hsv(
            rng.random_range(0.0..360.0),
            rng.random_range(0.0..0.2),
            rng.random_range(0.2..0.9),
        );
        let cx = rng.random_range(0.0..size as f64);
        let cy = rng.random_range(0.0..size as f64);
        let r = rng.random_range(0.05..0.2) * size as f64;
        for y in 0..size {
            for x in 0..size {
                let d = ((x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2)).sqrt();
                if d < r {
                    let old = c.get(x, y);
                    let a = 0.5;
                    c.set(x, y, std::array::from_fn(|i| old[i] * (1.0 - a) + color[i] * a));
                }
            }
        }
    }
    c
}

/// Paints pixels whose centre satisfies `inside(u, v)` in the entity frame
/// (rotated by `angle` about `(cx, cy)`), colouring them with `paint(u, v)`.
/// Returns the tight bounding box of painted pixels.
fn paint_shape(
    c: &mut Canvas,
    (cx, cy): (f64, f64),
    angle: f64,
    inside: impl Fn(f64, f64) -> bool,
    paint: impl Fn(f64, f64) -> [f64; 3],
) -> Option<BBox> {
    let (s, co) = angle.sin_cos();
    let mut bbox: Option<BBox> = None;
    for y in 0..c.size {
        for x in 0..c.size {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            let u = dx * co + dy * s;
            let v = -dx * s + dy * co;
            if inside(u, v) {
                c.set(x, y, paint(u, v));
                bbox = Some(match bbox {
                    None => BBox::new(x, y, x + 1, y + 1),
                    Some(b) => b.union(&BBox::new(x, y, x + 1, y + 1)),
                });
            }
        }
    }
    bbox
}

/// Elongated ellipse with lighter speckles.
fn cucumber(c: &mut Canvas, rng: &mut ChaCha8Rng) -> Option<BBox> {
    let n = c.size as f64;
    let a = rng.random_range(0.28..0.42) * n;
    let b = rng.random_range(0.08..0.13) * n;
    let center = (rng.random_range(0.35..0.65) * n, rng.random_range(0.35..0.65) * n);
    let angle = rng.random_range(0.0..std::f64::consts::PI);
    let body = entity_color(rng);
    let speck = body.map(|v| (v * 1.35).min(1.0));
    let phase = rng.random_range(0.0..10.0);
    paint_shape(
        c,
        center,
        angle,
        |u, v| (u / a).powi(2) + (v / b).powi(2) <= 1.0,
        |u, v| {
            if ((u * 1.7 + phase).sin() * (v * 2.3).cos()) > 0.75 {
                speck
            } else {
                body
            }
        },
    )
}

/// Box with a cabin, windows, a checkered band and two dark wheels.
fn taxi(c: &mut Canvas, rng: &mut ChaCha8Rng) -> Option<BBox> {
    let n = c.size as f64;
    let w = rng.random_range(0.45..0.7) * n;
    let h = rng.random_range(0.2..0.3) * n;
    let center = (rng.random_range(0.38..0.62) * n, rng.random_range(0.42..0.62) * n);
    let angle = rng.random_range(-0.35..0.35);
    let body = entity_color(rng);
    let window = [0.2, 0.22, 0.25];
    let tyre = [0.08, 0.08, 0.08];
    let wheel_r = h * 0.32;
    let cabin_w = w * 0.55;
    let cabin_h = h * 0.6;
    let wheels = [(-w * 0.3, h * 0.5), (w * 0.3, h * 0.5)];
    let in_wheel = |u: f64, v: f64| {
        wheels
            .iter()
            .any(|&(wu, wv)| (u - wu).powi(2) + (v - wv).powi(2) <= wheel_r * wheel_r)
    };
    let in_body = |u: f64, v: f64| u.abs() <= w / 2.0 && v.abs() <= h / 2.0;
    let in_cabin = |u: f64, v: f64| u.abs() <= cabin_w / 2.0 && v < -h / 2.0 && v >= -h / 2.0 - cabin_h;
    let cell = (h * 0.2).max(1.0);
    let check_light = body.map(|v| (v * 1.5).min(1.0));
    let check_dark = body.map(|v| v * 0.2);
    paint_shape(
        c,
        center,
        angle,
        |u, v| in_body(u, v) || in_cabin(u, v) || in_wheel(u, v),
        |u, v| {
            if in_wheel(u, v) {
                tyre
            } else if in_cabin(u, v)
                && u.abs() <= cabin_w / 2.0 - 1.0
                && v < -h / 2.0 - 1.0
                && u.abs() > 0.6
            {
                window
            } else if in_body(u, v) && v.abs() < cell {
                if ((u / cell).floor() + ((v + cell) / cell).floor()) as i64 % 2 == 0 {
                    check_light
                } else {
                    check_dark
                }
            } else {
                body
            }
        },
    )
}

/// Two-tone striped blob.
fn zebra(c: &mut Canvas, rng: &mut ChaCha8Rng) -> Option<BBox> {
    let n = c.size as f64;
    let a = rng.random_range(0.25..0.38) * n;
    let b = rng.random_range(0.15..0.25) * n;
    let center = (rng.random_range(0.38..0.62) * n, rng.random_range(0.38..0.62) * n);
    let angle = rng.random_range(0.0..std::f64::consts::PI);
    let stripe_angle = rng.random_range(0.0..std::f64::consts::PI);
    let period = rng.random_range(0.09..0.16) * n;
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let light = entity_color(rng);
    let shade = rng.random_range(0.1..0.3);
    let dark = light.map(|v| v * shade);
    let (ss, sc) = stripe_angle.sin_cos();
    paint_shape(
        c,
        center,
        angle,
        |u, v| (u / a).powi(2) + (v / b).powi(2) <= 1.0,
        |u, v| {
            let t = (u * sc + v * ss) * std::f64::consts::TAU / period + phase;
            if t.sin() > 0.0 {
                light
            } else {
                dark
            }
        },
    )
}

/// Background plus one entity; returns the image and the entity's box.
pub fn render_entity(entity: Entity, size: usize, rng: &mut ChaCha8Rng) -> (Tensor, BBox) {
    let mut c = background(size, rng);
    let bbox = match entity {
        Entity::Cucumber => cucumber(&mut c, rng),
        Entity::Taxi => taxi(&mut c, rng),
        Entity::Zebra => zebra(&mut c, rng),
    }
    .unwrap_or_else(|| BBox::new(0, 0, size, size));
    grain(&mut c, rng);
    (c.into_tensor(), bbox)
}

/// Background only, for tag concept examples.
pub fn render_noise(size: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut c = background(size, rng);
    grain(&mut c, rng);
    c.into_tensor()
}

fn grain(c: &mut Canvas, rng: &mut ChaCha8Rng) {
    let noise = Normal::new(0.0, GRAIN_SIGMA).expect("positive sigma");
    for p in c.px.iter_mut() {
        for v in p.iter_mut() {
            *v = (*v + noise.sample(rng)).clamp(0.0, 1.0);
        }
    }
}
