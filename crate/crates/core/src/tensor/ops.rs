//! Forward kernels and their vector-Jacobian products.
//!
//! Convolutions go through an im2col matrix and a single GEMM per call.

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Output spatial size `ceil(in / stride)`, zero padding split evenly
    /// with the extra row/column at the bottom/right.
    Same,
    /// No padding; output size `(in - k) / stride + 1`.
    Valid,
}

/// Resolved geometry of one convolution or pooling window sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub out_c: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(
        input: &[usize],
        kernels: &[usize],
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        let (in_h, in_w, in_c) = match *input {
            [h, w, c] => (h, w, c),
            _ => {
                return Err(Error::shape(
                    "conv2d",
                    format!("input must be HxWxC, got {input:?}"),
                ))
            }
        };
        let (kh, kw, kc, out_c) = match *kernels {
            [a, b, c, d] => (a, b, c, d),
            _ => {
                return Err(Error::shape(
                    "conv2d",
                    format!("kernels must be khxkwxCxK, got {kernels:?}"),
                ))
            }
        };
        if kc != in_c {
            return Err(Error::shape(
                "conv2d",
                format!("input has {in_c} channels but kernels expect {kc}"),
            ));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be positive"));
        }
        let (out_h, pad_top) = resolve_axis("height", in_h, kh, stride, padding)?;
        let (out_w, pad_left) = resolve_axis("width", in_w, kw, stride, padding)?;
        Ok(Self {
            in_h,
            in_w,
            in_c,
            kh,
            kw,
            out_c,
            stride,
            pad_top,
            pad_left,
            out_h,
            out_w,
        })
    }

    fn patch_len(&self) -> usize {
        self.kh * self.kw * self.in_c
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }
}

fn resolve_axis(
    axis: &str,
    size: usize,
    k: usize,
    stride: usize,
    padding: Padding,
) -> Result<(usize, usize)> {
    match padding {
        Padding::Valid => {
            if k > size {
                return Err(Error::shape(
                    "conv2d",
                    format!("kernel {axis} {k} exceeds input {axis} {size} with valid padding"),
                ));
            }
            Ok(((size - k) / stride + 1, 0))
        }
        Padding::Same => {
            let out = size.div_ceil(stride);
            let total = ((out - 1) * stride + k).saturating_sub(size);
            Ok((out, total / 2))
        }
    }
}

/// Unrolls every receptive field into a row: `positions x (kh*kw*C)`.
fn im2col(input: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let plen = g.patch_len();
    let mut cols = vec![0.0; g.positions() * plen];
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let row = &mut cols[(oy * g.out_w + ox) * plen..][..plen];
            for dy in 0..g.kh {
                let iy = (oy * g.stride + dy) as isize - g.pad_top as isize;
                if iy < 0 || iy >= g.in_h as isize {
                    continue;
                }
                for dx in 0..g.kw {
                    let ix = (ox * g.stride + dx) as isize - g.pad_left as isize;
                    if ix < 0 || ix >= g.in_w as isize {
                        continue;
                    }
                    let src = (iy as usize * g.in_w + ix as usize) * g.in_c;
                    let dst = (dy * g.kw + dx) * g.in_c;
                    row[dst..dst + g.in_c].copy_from_slice(&input[src..src + g.in_c]);
                }
            }
        }
    }
    cols
}

/// Scatter-adds unrolled rows back to an `HxWxC` buffer.
fn col2im(cols: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let plen = g.patch_len();
    let mut out = vec![0.0; g.in_h * g.in_w * g.in_c];
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let row = &cols[(oy * g.out_w + ox) * plen..][..plen];
            for dy in 0..g.kh {
                let iy = (oy * g.stride + dy) as isize - g.pad_top as isize;
                if iy < 0 || iy >= g.in_h as isize {
                    continue;
                }
                for dx in 0..g.kw {
                    let ix = (ox * g.stride + dx) as isize - g.pad_left as isize;
                    if ix < 0 || ix >= g.in_w as isize {
                        continue;
                    }
                    let dst = (iy as usize * g.in_w + ix as usize) * g.in_c;
                    let src = (dy * g.kw + dx) * g.in_c;
                    for (o, &v) in out[dst..dst + g.in_c]
                        .iter_mut()
                        .zip(&row[src..src + g.in_c])
                    {
                        *o += v;
                    }
                }
            }
        }
    }
    out
}

/// Row-major `c = a(m x k) * b(k x n)` with arbitrary strides on `a` and `b`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    debug_assert!(m == 0 || k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(k == 0 || n == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    // SAFETY: the debug assertions above describe the extents the callers
    // guarantee; every access stays inside `a`, `b` and `c`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Cross-correlation of an `HxWxC` input with `khxkwxCxK` kernels.
pub fn conv2d(input: &Tensor, kernels: &Tensor, stride: usize, padding: Padding) -> Result<Tensor> {
    let g = ConvGeometry::new(input.shape(), kernels.shape(), stride, padding)?;
    let cols = im2col(input.data(), &g);
    let plen = g.patch_len();
    let mut out = vec![0.0; g.positions() * g.out_c];
    gemm(
        g.positions(),
        plen,
        g.out_c,
        &cols,
        (plen, 1),
        kernels.data(),
        (g.out_c, 1),
        &mut out,
    );
    Tensor::new(vec![g.out_h, g.out_w, g.out_c], out)
}

/// Gradients of a convolution w.r.t. its input and/or kernels.
pub fn conv2d_backward(
    input: &Tensor,
    kernels: &Tensor,
    stride: usize,
    padding: Padding,
    grad_out: &Tensor,
    want_input: bool,
    want_kernels: bool,
) -> Result<(Option<Tensor>, Option<Tensor>)> {
    let g = ConvGeometry::new(input.shape(), kernels.shape(), stride, padding)?;
    if grad_out.shape() != [g.out_h, g.out_w, g.out_c] {
        return Err(Error::shape(
            "conv2d_backward",
            format!(
                "upstream gradient {:?} vs output {:?}",
                grad_out.shape(),
                [g.out_h, g.out_w, g.out_c]
            ),
        ));
    }
    let plen = g.patch_len();
    let m = g.positions();
    let d_kernels = if want_kernels {
        let cols = im2col(input.data(), &g);
        let mut dk = vec![0.0; plen * g.out_c];
        // cols^T (plen x m) * grad (m x K)
        gemm(plen, m, g.out_c, &cols, (1, plen), grad_out.data(), (g.out_c, 1), &mut dk);
        Some(Tensor::new(kernels.shape().to_vec(), dk)?)
    } else {
        None
    };
    let d_input = if want_input {
        let mut dcols = vec![0.0; m * plen];
        // grad (m x K) * W^T (K x plen)
        gemm(m, g.out_c, plen, grad_out.data(), (g.out_c, 1), kernels.data(), (1, g.out_c), &mut dcols);
        Some(Tensor::new(input.shape().to_vec(), col2im(&dcols, &g))?)
    } else {
        None
    };
    Ok((d_input, d_kernels))
}

/// Adds a per-channel bias to the last axis.
pub fn add_channel_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let k = *x.shape().last().expect("rank >= 1");
    if bias.shape() != [k] {
        return Err(Error::shape(
            "bias",
            format!("bias {:?} for {k} channels", bias.shape()),
        ));
    }
    let mut out = x.clone();
    for chunk in out.data_mut().chunks_exact_mut(k) {
        for (v, b) in chunk.iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
    Ok(out)
}

/// Sums an `...xK` gradient down to the `K` bias entries.
pub fn channel_bias_backward(grad_out: &Tensor) -> Tensor {
    let k = *grad_out.shape().last().expect("rank >= 1");
    let mut acc = vec![0.0; k];
    for chunk in grad_out.data().chunks_exact(k) {
        for (a, g) in acc.iter_mut().zip(chunk) {
            *a += g;
        }
    }
    Tensor::from_vec(acc)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Subgradient 0 at the kink.
pub fn relu_backward(x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    x.zip_with(grad_out, |v, g| if v > 0.0 { g } else { 0.0 })
}

/// Spatial mean per channel of an `HxWxK` tensor.
pub fn gap(fmaps: &Tensor) -> Result<Tensor> {
    let (h, w, k) = fmaps
        .hwc()
        .ok_or_else(|| Error::shape("gap", format!("expected HxWxK, got {:?}", fmaps.shape())))?;
    let mut acc = vec![0.0; k];
    for px in fmaps.data().chunks_exact(k) {
        for (a, v) in acc.iter_mut().zip(px) {
            *a += v;
        }
    }
    let n = (h * w) as f64;
    Ok(Tensor::from_vec(acc.into_iter().map(|v| v / n).collect()))
}

pub fn gap_backward(input_shape: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    let (h, w, k) = match *input_shape {
        [h, w, k] => (h, w, k),
        _ => return Err(Error::shape("gap_backward", format!("{input_shape:?}"))),
    };
    if grad_out.len() != k {
        return Err(Error::shape(
            "gap_backward",
            format!("{} upstream values for {k} channels", grad_out.len()),
        ));
    }
    let n = (h * w) as f64;
    let per: Vec<f64> = grad_out.data().iter().map(|g| g / n).collect();
    let mut data = Vec::with_capacity(h * w * k);
    for _ in 0..h * w {
        data.extend_from_slice(&per);
    }
    Tensor::new(input_shape.to_vec(), data)
}

/// Max pooling without padding. Returns the output and, per output element,
/// the flat index of the winning input element (first maximum wins).
pub fn maxpool2d(input: &Tensor, size: usize, stride: usize) -> Result<(Tensor, Vec<usize>)> {
    let (h, w, c) = input.hwc().ok_or_else(|| {
        Error::shape("maxpool2d", format!("expected HxWxC, got {:?}", input.shape()))
    })?;
    if size == 0 || stride == 0 || size > h || size > w {
        return Err(Error::shape(
            "maxpool2d",
            format!("window {size} stride {stride} on {h}x{w}"),
        ));
    }
    let oh = (h - size) / stride + 1;
    let ow = (w - size) / stride + 1;
    let x = input.data();
    let mut out = Vec::with_capacity(oh * ow * c);
    let mut arg = Vec::with_capacity(oh * ow * c);
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let mut best_idx = ((oy * stride) * w + ox * stride) * c + ch;
                let mut best = x[best_idx];
                for dy in 0..size {
                    for dx in 0..size {
                        let idx = ((oy * stride + dy) * w + ox * stride + dx) * c + ch;
                        if x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_idx);
            }
        }
    }
    Ok((Tensor::new(vec![oh, ow, c], out)?, arg))
}

pub fn maxpool2d_backward(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    if argmax.len() != grad_out.len() {
        return Err(Error::shape(
            "maxpool2d_backward",
            format!("{} indices for {} gradients", argmax.len(), grad_out.len()),
        ));
    }
    let mut g = Tensor::zeros(input_shape);
    let d = g.data_mut();
    for (&i, &v) in argmax.iter().zip(grad_out.data()) {
        d[i] += v;
    }
    Ok(g)
}

/// `x (flattened, n) * weights (n x m) + bias (m)`.
pub fn dense(x: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (n, m) = match *weights.shape() {
        [n, m] => (n, m),
        _ => return Err(Error::shape("dense", format!("weights must be n x m, got {:?}", weights.shape()))),
    };
    if x.len() != n {
        return Err(Error::shape("dense", format!("input has {} values, weights expect {n}", x.len())));
    }
    if bias.shape() != [m] {
        return Err(Error::shape("dense", format!("bias {:?} for {m} units", bias.shape())));
    }
    let mut out = bias.data().to_vec();
    let wd = weights.data();
    for (i, &xi) in x.data().iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        for (o, &wv) in out.iter_mut().zip(&wd[i * m..(i + 1) * m]) {
            *o += xi * wv;
        }
    }
    Ok(Tensor::from_vec(out))
}

/// Returns `(d_input, d_weights)`; the bias gradient is `grad_out` itself.
pub fn dense_backward(
    x: &Tensor,
    weights: &Tensor,
    grad_out: &Tensor,
    want_input: bool,
    want_weights: bool,
) -> Result<(Option<Tensor>, Option<Tensor>)> {
    let (n, m) = match *weights.shape() {
        [n, m] => (n, m),
        _ => return Err(Error::shape("dense_backward", format!("{:?}", weights.shape()))),
    };
    if grad_out.len() != m || x.len() != n {
        return Err(Error::shape(
            "dense_backward",
            format!("input {:?}, weights {:?}, upstream {:?}", x.shape(), weights.shape(), grad_out.shape()),
        ));
    }
    let wd = weights.data();
    let go = grad_out.data();
    let d_input = want_input.then(|| {
        let data = (0..n)
            .map(|i| wd[i * m..(i + 1) * m].iter().zip(go).map(|(w, g)| w * g).sum())
            .collect();
        Tensor::new(x.shape().to_vec(), data).expect("same length as x")
    });
    let d_weights = want_weights.then(|| {
        let mut data = Vec::with_capacity(n * m);
        for &xi in x.data() {
            data.extend(go.iter().map(|g| xi * g));
        }
        Tensor::new(vec![n, m], data).expect("n*m values")
    });
    Ok((d_input, d_weights))
}

pub fn softmax(logits: &Tensor) -> Tensor {
    let max = logits.max();
    let exps: Vec<f64> = logits.data().iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Tensor::new(logits.shape().to_vec(), exps.into_iter().map(|e| e / total).collect())
        .expect("same shape")
}

/// Negative log-likelihood of `label` under `softmax(logits)`.
pub fn cross_entropy_loss(logits: &Tensor, label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::UnknownClass {
            index: label,
            classes: logits.len(),
        });
    }
    let max = logits.max();
    let lse = max + logits.data().iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    Ok((lse - logits.data()[label]).max(0.0))
}

/// `softmax(logits) - onehot(label)`.
pub fn cross_entropy_backward(logits: &Tensor, label: usize) -> Tensor {
    let mut p = softmax(logits);
    p.data_mut()[label] -= 1.0;
    p
}
