//! Minimal line and bar charts rendered to both SVG and PNG from one list
//! of drawing primitives.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::Result;
use image::{Rgb, RgbImage};

pub type Color = [u8; 3];

const PALETTE: [Color; 6] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
];
const AXIS: Color = [40, 40, 40];
const GRID: Color = [225, 225, 225];
const WHITE: Color = [255, 255, 255];

pub fn palette(i: usize) -> Color {
    PALETTE[i % PALETTE.len()]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Anchor {
    Start,
    Middle,
    End,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Shape {
    Line {
        from: (f64, f64),
        to: (f64, f64),
        width: f64,
        color: Color,
    },
    Rect {
        x: f64,
        y: f64,
        w: f64,
        h: f64,
        color: Color,
    },
    Circle {
        center: (f64, f64),
        r: f64,
        color: Color,
    },
    /// `y` is the text baseline; `size` the cap height in pixels.
    Text {
        x: f64,
        y: f64,
        text: String,
        size: f64,
        anchor: Anchor,
        color: Color,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Chart {
    pub width: u32,
    pub height: u32,
    pub shapes: Vec<Shape>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub values: Vec<f64>,
}

fn hex(c: Color) -> String {
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

impl Chart {
    fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            shapes: vec![Shape::Rect {
                x: 0.0,
                y: 0.0,
                w: width as f64,
                h: height as f64,
                color: WHITE,
            }],
        }
    }

    fn line(&mut self, from: (f64, f64), to: (f64, f64), width: f64, color: Color) {
        self.shapes.push(Shape::Line { from, to, width, color });
    }

    fn text(&mut self, x: f64, y: f64, text: impl Into<String>, size: f64, anchor: Anchor) {
        self.shapes.push(Shape::Text {
            x,
            y,
            text: text.into(),
            size,
            anchor,
            color: AXIS,
        });
    }

    pub fn to_svg(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#,
            w = self.width,
            h = self.height
        );
        for shape in &self.shapes {
            let _ = match shape {
                Shape::Line { from, to, width, color } => writeln!(
                    s,
                    r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="{}" stroke-width="{width}"/>"#,
                    from.0,
                    from.1,
                    to.0,
                    to.1,
                    hex(*color)
                ),
                Shape::Rect { x, y, w, h, color } => writeln!(
                    s,
                    r#"<rect x="{x:.2}" y="{y:.2}" width="{w:.2}" height="{h:.2}" fill="{}"/>"#,
                    hex(*color)
                ),
                Shape::Circle { center, r, color } => writeln!(
                    s,
                    r#"<circle cx="{:.2}" cy="{:.2}" r="{r}" fill="{}"/>"#,
                    center.0,
                    center.1,
                    hex(*color)
                ),
                Shape::Text {
                    x,
                    y,
                    text,
                    size,
                    anchor,
                    color,
                } => {
                    let a = match anchor {
                        Anchor::Start => "start",
                        Anchor::Middle => "middle",
                        Anchor::End => "end",
                    };
                    writeln!(
                        s,
                        r#"<text x="{x:.2}" y="{y:.2}" font-family="monospace" font-size="{:.1}" text-anchor="{a}" fill="{}">{}</text>"#,
                        size * 1.4,
                        hex(*color),
                        escape(text)
                    )
                }
            };
        }
        s.push_str("</svg>\n");
        s
    }

    pub fn to_png(&self) -> RgbImage {
        let mut img = RgbImage::from_pixel(self.width, self.height, Rgb(WHITE));
        for shape in &self.shapes {
            match shape {
                Shape::Line { from, to, width, color } => draw_line(&mut img, *from, *to, *width, *color),
                Shape::Rect { x, y, w, h, color } => fill(&mut img, *x, *y, x + w, y + h, |_, _| true, *color),
                Shape::Circle { center, r, color } => {
                    let (cx, cy, r) = (center.0, center.1, *r);
                    fill(
                        &mut img,
                        cx - r,
                        cy - r,
                        cx + r,
                        cy + r,
                        |x, y| (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
                        *color,
                    );
                }
                Shape::Text {
                    x,
                    y,
                    text,
                    size,
                    anchor,
                    color,
                } => draw_text(&mut img, *x, *y, text, *size, *anchor, *color),
            }
        }
        img
    }

    /// Writes `<stem>.svg` and `<stem>.png` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
        std::fs::create_dir_all(dir)?;
        let svg = dir.join(format!("{stem}.svg"));
        let png = dir.join(format!("{stem}.png"));
        std::fs::write(&svg, self.to_svg())?;
        self.to_png().save(&png)?;
        Ok((svg, png))
    }
}

/// Paints pixels whose centre lies in the box and satisfies `inside`.
fn fill(img: &mut RgbImage, x0: f64, y0: f64, x1: f64, y1: f64, inside: impl Fn(f64, f64) -> bool, c: Color) {
    let (w, h) = (img.width() as f64, img.height() as f64);
    let xs = x0.max(0.0).floor() as u32;
    let ys = y0.max(0.0).floor() as u32;
    let xe = x1.min(w).ceil() as u32;
    let ye = y1.min(h).ceil() as u32;
    for y in ys..ye {
        for x in xs..xe {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            if px >= x0 && px <= x1 && py >= y0 && py <= y1 && inside(px, py) {
                img.put_pixel(x, y, Rgb(c));
            }
        }
    }
}

fn draw_line(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), width: f64, c: Color) {
    let half = (width / 2.0).max(0.5);
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    fill(
        img,
        a.0.min(b.0) - half,
        a.1.min(b.1) - half,
        a.0.max(b.0) + half,
        a.1.max(b.1) + half,
        |x, y| {
            let t = if len2 == 0.0 {
                0.0
            } else {
                (((x - a.0) * dx + (y - a.1) * dy) / len2).clamp(0.0, 1.0)
            };
            let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
            (x - qx).powi(2) + (y - qy).powi(2) <= half * half
        },
        c,
    );
}

/// 5x7 bitmap glyphs; lowercase letters are drawn as capitals.
fn glyph(ch: char) -> [u8; 7] {
    match ch.to_ascii_uppercase() {
        '0' => [0b01110, 0b10001, 0b10011, 0b10101, 0b11001, 0b10001, 0b01110],
        '1' => [0b00100, 0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110],
        '2' => [0b01110, 0b10001, 0b00001, 0b00010, 0b00100, 0b01000, 0b11111],
        '3' => [0b11111, 0b00010, 0b00100, 0b00010, 0b00001, 0b10001, 0b01110],
        '4' => [0b00010, 0b00110, 0b01010, 0b10010, 0b11111, 0b00010, 0b00010],
        '5' => [0b11111, 0b10000, 0b11110, 0b00001, 0b00001, 0b10001, 0b01110],
        '6' => [0b00110, 0b01000, 0b10000, 0b11110, 0b10001, 0b10001, 0b01110],
        '7' => [0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b01000, 0b01000],
        '8' => [0b01110, 0b10001, 0b10001, 0b01110, 0b10001, 0b10001, 0b01110],
        '9' => [0b01110, 0b10001, 0b10001, 0b01111, 0b00001, 0b00010, 0b01100],
        'A' => [0b01110, 0b10001, 0b10001, 0b11111, 0b10001, 0b10001, 0b10001],
        'B' => [0b11110, 0b10001, 0b10001, 0b11110, 0b10001, 0b10001, 0b11110],
        'C' => [0b01110, 0b10001, 0b10000, 0b10000, 0b10000, 0b10001, 0b01110],
        'D' => [0b11100, 0b10010, 0b10001, 0b10001, 0b10001, 0b10010, 0b11100],
        'E' => [0b11111, 0b10000, 0b10000, 0b11110, 0b10000, 0b10000, 0b11111],
        'F' => [0b11111, 0b10000, 0b10000, 0b11110, 0b10000, 0b10000, 0b10000],
        'G' => [0b01110, 0b10001, 0b10000, 0b10111, 0b10001, 0b10001, 0b01111],
        'H' => [0b10001, 0b10001, 0b10001, 0b11111, 0b10001, 0b10001, 0b10001],
        'I' => [0b01110, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110],
        'J' => [0b00111, 0b00010, 0b00010, 0b00010, 0b00010, 0b10010, 0b01100],
        'K' => [0b10001, 0b10010, 0b10100, 0b11000, 0b10100, 0b10010, 0b10001],
        'L' => [0b10000, 0b10000, 0b10000, 0b10000, 0b10000, 0b10000, 0b11111],
        'M' => [0b10001, 0b11011, 0b10101, 0b10101, 0b10001, 0b10001, 0b10001],
        'N' => [0b10001, 0b10001, 0b11001, 0b10101, 0b10011, 0b10001, 0b10001],
        'O' => [0b01110, 0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01110],
        'P' => [0b11110, 0b10001, 0b10001, 0b11110, 0b10000, 0b10000, 0b10000],
        'Q' => [0b01110, 0b10001, 0b10001, 0b10001, 0b10101, 0b10010, 0b01101],
        'R' => [0b11110, 0b10001, 0b10001, 0b11110, 0b10100, 0b10010, 0b10001],
        'S' => [0b01111, 0b10000, 0b10000, 0b01110, 0b00001, 0b00001, 0b11110],
        'T' => [0b11111, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100],
        'U' => [0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01110],
        'V' => [0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01010, 0b00100],
        'W' => [0b10001, 0b10001, 0b10001, 0b10101, 0b10101, 0b10101, 0b01010],
        'X' => [0b10001, 0b10001, 0b01010, 0b00100, 0b01010, 0b10001, 0b10001],
        'Y' => [0b10001, 0b10001, 0b01010, 0b00100, 0b00100, 0b00100, 0b00100],
        'Z' => [0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b10000, 0b11111],
        ' ' => [0; 7],
        '.' => [0, 0, 0, 0, 0, 0b01100, 0b01100],
        ',' => [0, 0, 0, 0, 0b01100, 0b00100, 0b01000],
        '-' => [0, 0, 0, 0b11111, 0, 0, 0],
        '+' => [0, 0b00100, 0b00100, 0b11111, 0b00100, 0b00100, 0],
        '=' => [0, 0, 0b11111, 0, 0b11111, 0, 0],
        '_' => [0, 0, 0, 0, 0, 0, 0b11111],
        '%' => [0b11000, 0b11001, 0b00010, 0b00100, 0b01000, 0b10011, 0b00011],
        '*' => [0, 0b00100, 0b10101, 0b01110, 0b10101, 0b00100, 0],
        ':' => [0, 0b01100, 0b01100, 0, 0b01100, 0b01100, 0],
        '(' => [0b00010, 0b00100, 0b01000, 0b01000, 0b01000, 0b00100, 0b00010],
        ')' => [0b01000, 0b00100, 0b00010, 0b00010, 0b00010, 0b00100, 0b01000],
        '/' => [0, 0b00001, 0b00010, 0b00100, 0b01000, 0b10000, 0],
        '"' => [0b01010, 0b01010, 0, 0, 0, 0, 0],
        _ => [0b01110, 0b10001, 0b00001, 0b00010, 0b00100, 0, 0b00100],
    }
}

fn draw_text(img: &mut RgbImage, x: f64, y: f64, text: &str, size: f64, anchor: Anchor, c: Color) {
    let scale = (size / 7.0).round().max(1.0) as i64;
    let advance = 6 * scale;
    let width = text.chars().count() as i64 * advance - scale;
    let x0 = match anchor {
        Anchor::Start => x as i64,
        Anchor::Middle => x as i64 - width / 2,
        Anchor::End => x as i64 - width,
    };
    let top = y as i64 - 7 * scale;
    for (i, ch) in text.chars().enumerate() {
        let g = glyph(ch);
        for (row, bits) in g.iter().enumerate() {
            for col in 0..5 {
                if bits & (1 << (4 - col)) == 0 {
                    continue;
                }
                for dy in 0..scale {
                    for dx in 0..scale {
                        let px = x0 + i as i64 * advance + col * scale + dx;
                        let py = top + row as i64 * scale + dy;
                        if px >= 0 && py >= 0 && (px as u32) < img.width() && (py as u32) < img.height() {
                            img.put_pixel(px as u32, py as u32, Rgb(c));
                        }
                    }
                }
            }
        }
    }
}

struct Frame {
    left: f64,
    right: f64,
    top: f64,
    bottom: f64,
    y_min: f64,
    y_max: f64,
}

impl Frame {
    fn y(&self, v: f64) -> f64 {
        let t = ((v - self.y_min) / (self.y_max - self.y_min)).clamp(0.0, 1.0);
        self.bottom - t * (self.bottom - self.top)
    }
}

const W: u32 = 720;
const H: u32 = 420;

fn frame(chart: &mut Chart, title: &str, y_label: &str, y_min: f64, y_max: f64, legend: &[String]) -> Frame {
    let f = Frame {
        left: 70.0,
        right: W as f64 - 170.0,
        top: 50.0,
        bottom: H as f64 - 60.0,
        y_min,
        y_max,
    };
    chart.text(W as f64 / 2.0, 28.0, title, 14.0, Anchor::Middle);
    chart.text(12.0, f.top - 14.0, y_label, 7.0, Anchor::Start);
    for i in 0..=4 {
        let v = y_min + (y_max - y_min) * i as f64 / 4.0;
        let y = f.y(v);
        chart.line((f.left, y), (f.right, y), 1.0, GRID);
        chart.text(f.left - 8.0, y + 4.0, format!("{v:.2}"), 7.0, Anchor::End);
    }
    chart.line((f.left, f.top), (f.left, f.bottom), 1.5, AXIS);
    chart.line((f.left, f.bottom), (f.right, f.bottom), 1.5, AXIS);
    for (i, name) in legend.iter().enumerate() {
        let y = f.top + 10.0 + 22.0 * i as f64;
        chart.shapes.push(Shape::Rect {
            x: f.right + 20.0,
            y: y - 8.0,
            w: 14.0,
            h: 10.0,
            color: palette(i),
        });
        chart.text(f.right + 40.0, y + 2.0, name.clone(), 7.0, Anchor::Start);
    }
    f
}

/// One polyline per series over categorical x positions.
pub fn line_chart(title: &str, y_label: &str, x_labels: &[String], series: &[Series], y_range: (f64, f64)) -> Chart {
    let mut chart = Chart::new(W, H);
    let names: Vec<String> = series.iter().map(|s| s.name.clone()).collect();
    let f = frame(&mut chart, title, y_label, y_range.0, y_range.1, &names);
    let n = x_labels.len().max(1);
    let x = |i: usize| {
        if n == 1 {
            (f.left + f.right) / 2.0
        } else {
            f.left + 30.0 + (f.right - f.left - 60.0) * i as f64 / (n - 1) as f64
        }
    };
    for (i, label) in x_labels.iter().enumerate() {
        chart.text(x(i), f.bottom + 22.0, label.clone(), 7.0, Anchor::Middle);
    }
    for (si, s) in series.iter().enumerate() {
        let pts: Vec<(f64, f64)> = s
            .values
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .map(|(i, &v)| (x(i), f.y(v)))
            .collect();
        for w in pts.windows(2) {
            chart.line(w[0], w[1], 2.5, palette(si));
        }
        for p in pts {
            chart.shapes.push(Shape::Circle {
                center: p,
                r: 4.0,
                color: palette(si),
            });
        }
    }
    chart
}

/// Grouped bars; `flags[g][s]` draws an asterisk above bar `s` of group `g`.
pub fn bar_chart(
    title: &str,
    y_label: &str,
    groups: &[String],
    series: &[Series],
    flags: Option<&[Vec<bool>]>,
    y_range: (f64, f64),
) -> Chart {
    let mut chart = Chart::new(W, H);
    let names: Vec<String> = series.iter().map(|s| s.name.clone()).collect();
    let f = frame(&mut chart, title, y_label, y_range.0, y_range.1, &names);
    let g = groups.len().max(1) as f64;
    let group_w = (f.right - f.left) / g;
    let bar_w = group_w * 0.8 / series.len().max(1) as f64;
    for (gi, label) in groups.iter().enumerate() {
        let gx = f.left + group_w * gi as f64 + group_w * 0.1;
        chart.text(gx + group_w * 0.4, f.bottom + 22.0, label.clone(), 7.0, Anchor::Middle);
        for (si, s) in series.iter().enumerate() {
            let v = s.values.get(gi).copied().unwrap_or(f64::NAN);
            if !v.is_finite() {
                continue;
            }
            let x = gx + bar_w * si as f64;
            let y = f.y(v.max(y_range.0));
            chart.shapes.push(Shape::Rect {
                x: x + 1.0,
                y,
                w: (bar_w - 2.0).max(1.0),
                h: f.bottom - y,
                color: palette(si),
            });
            if flags.and_then(|fl| fl.get(gi)).and_then(|row| row.get(si)).copied().unwrap_or(false) {
                chart.text(x + bar_w / 2.0, y - 4.0, "*", 14.0, Anchor::Middle);
            }
        }
    }
    chart
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series() -> Vec<Series> {
        vec![
            Series {
                name: "a".into(),
                values: vec![0.1, 0.5, 0.9],
            },
            Series {
                name: "b".into(),
                values: vec![0.7, f64::NAN, 0.2],
            },
        ]
    }

    #[test]
    fn line_chart_renders_both_formats() {
        let labels: Vec<String> = ["0%", "50%", "100%"].iter().map(|s| s.to_string()).collect();
        let c = line_chart("Accuracy", "acc", &labels, &series(), (0.0, 1.0));
        let svg = c.to_svg();
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<circle").count(), 5);
        let png = c.to_png();
        assert_eq!((png.width(), png.height()), (W, H));
        assert!(png.pixels().any(|p| p.0 == palette(0)));
        assert!(png.pixels().any(|p| p.0 == palette(1)));
    }

    #[test]
    fn bar_chart_marks_flagged_bars() {
        let groups: Vec<String> = ["x", "y", "z"].iter().map(|s| s.to_string()).collect();
        let flags = vec![vec![true, false], vec![false, false], vec![false, true]];
        let c = bar_chart("Scores", "score", &groups, &series(), Some(&flags), (0.0, 1.0));
        let stars = c
            .shapes
            .iter()
            .filter(|s| matches!(s, Shape::Text { text, .. } if text == "*"))
            .count();
        assert_eq!(stars, 2);
        assert!(!c.to_svg().contains("&lt;"));
    }

    #[test]
    fn text_is_rasterised() {
        let mut img = RgbImage::from_pixel(40, 20, Rgb(WHITE));
        draw_text(&mut img, 2.0, 12.0, "T", 7.0, Anchor::Start, AXIS);
        // the top bar of a T is five pixels wide
        let top: Vec<bool> = (2..7).map(|x| img.get_pixel(x, 5).0 == AXIS).collect();
        assert_eq!(top, vec![true; 5]);
    }
}
