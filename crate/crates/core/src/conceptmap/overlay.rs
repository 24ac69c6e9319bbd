use std::path::Path;

use image::RgbImage;

use super::NormalizedConceptMap;
use crate::error::{Error, Result};
use crate::synthdata::to_rgb8;
use crate::tensor::Tensor;

pub const DEFAULT_ALPHA: f64 = 0.5;

/// Resizes an `HxW` map to `out_h x out_w` by bilinear interpolation with
/// pixel-centre alignment and edge clamping.
pub fn upsample_bilinear(map: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (h, w) = match map.shape() {
        &[h, w] => (h, w),
        s => return Err(Error::shape("upsample", format!("expected HxW map, got {s:?}"))),
    };
    let src = |y: usize, x: usize| map.data()[y * w + x];
    let coord = |o: usize, out: usize, inp: usize| -> (usize, usize, f64) {
        let c = ((o as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64);
        let lo = c.floor() as usize;
        let hi = (lo + 1).min(inp - 1);
        (lo, hi, c - lo as f64)
    };
    let mut data = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        let (y0, y1, fy) = coord(oy, out_h, h);
        for ox in 0..out_w {
            let (x0, x1, fx) = coord(ox, out_w, w);
            let top = src(y0, x0) * (1.0 - fx) + src(y0, x1) * fx;
            let bottom = src(y1, x0) * (1.0 - fx) + src(y1, x1) * fx;
            data.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    Tensor::new(vec![out_h, out_w], data)
}

/// Viridis sampled at 17 evenly spaced stops.
const VIRIDIS: [[f64; 3]; 17] = [
    [0.267004, 0.004874, 0.329415],
    [0.282327, 0.094955, 0.417331],
    [0.278826, 0.175490, 0.483397],
    [0.258965, 0.251537, 0.524736],
    [0.229739, 0.322361, 0.545706],
    [0.199430, 0.387607, 0.554642],
    [0.172719, 0.448791, 0.557885],
    [0.149039, 0.508051, 0.557250],
    [0.127568, 0.566949, 0.550556],
    [0.120638, 0.625828, 0.533488],
    [0.157851, 0.683765, 0.501686],
    [0.246070, 0.738910, 0.452024],
    [0.369214, 0.788888, 0.382914],
    [0.515992, 0.831158, 0.294279],
    [0.678489, 0.863742, 0.189503],
    [0.845561, 0.887322, 0.099702],
    [0.993248, 0.906157, 0.143936],
];

/// Viridis colour for `v` in `[0, 1]` (clamped), as RGB in `[0, 1]`.
pub fn colormap(v: f64) -> [f64; 3] {
    let t = v.clamp(0.0, 1.0) * (VIRIDIS.len() - 1) as f64;
    let i = (t.floor() as usize).min(VIRIDIS.len() - 2);
    let f = t - i as f64;
    std::array::from_fn(|c| VIRIDIS[i][c] * (1.0 - f) + VIRIDIS[i + 1][c] * f)
}

/// `(1 - alpha) * image + alpha * colormap(upsampled map)`, as an `HxWx3`
/// tensor.
pub fn blend_overlay(image: &Tensor, map: &NormalizedConceptMap, alpha: f64) -> Result<Tensor> {
    let (h, w, _) = image
        .hwc()
        .filter(|&(_, _, c)| c == 3)
        .ok_or_else(|| Error::shape("overlay", format!("expected HxWx3 image, got {:?}", image.shape())))?;
    let up = upsample_bilinear(&map.values, h, w)?;
    let mut out = image.clone();
    for (px, &m) in out.data_mut().chunks_exact_mut(3).zip(up.data()) {
        let c = colormap(m);
        for (p, cv) in px.iter_mut().zip(c) {
            *p = (1.0 - alpha) * *p + alpha * cv;
        }
    }
    Ok(out)
}

pub fn render_overlay(image: &Tensor, map: &NormalizedConceptMap, alpha: f64, path: impl AsRef<Path>) -> Result<()> {
    let blended = blend_overlay(image, map, alpha)?;
    let img: RgbImage = to_rgb8(&blended)?;
    img.save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nmap(values: Tensor) -> NormalizedConceptMap {
        NormalizedConceptMap {
            layer: "l".into(),
            values,
        }
    }

    #[test]
    fn constant_upsamples_to_constant() {
        let up = upsample_bilinear(&Tensor::full(&[3, 5], 0.25), 17, 9).unwrap();
        assert_eq!(up.shape(), &[17, 9]);
        assert!(up.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn upsample_interpolates_between_centres() {
        let m = Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap();
        let up = upsample_bilinear(&m, 1, 4).unwrap();
        assert_eq!(up.data(), &[0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn zero_map_blends_colormap_zero() {
        let img = Tensor::full(&[8, 8, 3], 0.6);
        let out = blend_overlay(&img, &nmap(Tensor::zeros(&[2, 2])), 0.5).unwrap();
        let c0 = colormap(0.0);
        for px in out.data().chunks(3) {
            for ch in 0..3 {
                assert!((px[ch] - (0.3 + 0.5 * c0[ch])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn png_has_image_dims() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("o.png");
        render_overlay(&Tensor::zeros(&[12, 20, 3]), &nmap(Tensor::full(&[3, 5], 1.0)), DEFAULT_ALPHA, &path).unwrap();
        let img = image::open(&path).unwrap();
        assert_eq!((img.width(), img.height()), (20, 12));
    }

    #[test]
    fn colormap_is_viridis_endpoints() {
        let lo = colormap(0.0).map(|v| (v * 255.0).round() as u8);
        let hi = colormap(1.0).map(|v| (v * 255.0).round() as u8);
        assert_eq!(lo, [68, 1, 84]);
        assert_eq!(hi, [253, 231, 37]);
        // perceptually ordered: luminance increases with value
        let lum = |c: [f64; 3]| 0.2126 * c[0] + 0.7152 * c[1] + 0.0722 * c[2];
        for i in 0..100 {
            assert!(lum(colormap((i + 1) as f64 / 100.0)) > lum(colormap(i as f64 / 100.0)));
        }
    }
}
