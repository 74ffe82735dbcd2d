//! Forward kernels and their backward rules.
//!
//! Layouts: images are NHWC, convolution kernels are `[kh, kw, c_in, c_out]`,
//! affine weights are `[d_in, d_out]`.

use serde::{Deserialize, Serialize};

use super::gemm::gemm;
use super::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    Same,
    Valid,
}

// ---------------------------------------------------------------- affine

fn affine_dims(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<(usize, usize, usize)> {
    let (xs, ws, bs) = (x.shape(), w.shape(), b.shape());
    if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || xs[1] != ws[0] || bs[0] != ws[1] {
        return Err(Error::shape(
            "affine",
            format!("input {xs:?}, weight {ws:?}, bias {bs:?}"),
        ));
    }
    Ok((xs[0], ws[0], ws[1]))
}

/// `out[i,j] = Σ_k x[i,k]·w[k,j] + b[j]`.
pub fn affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, din, dout) = affine_dims(x, w, b)?;
    let mut out = Vec::with_capacity(n * dout);
    for _ in 0..n {
        out.extend_from_slice(b.data());
    }
    gemm(n, din, dout, x.data(), false, w.data(), false, &mut out, 1.0);
    Tensor::checked("affine", vec![n, dout], out)
}

pub(crate) struct AffineGrads {
    pub x: Option<Vec<f64>>,
    pub w: Option<Vec<f64>>,
    pub b: Option<Vec<f64>>,
}

pub(crate) fn affine_backward(
    x: &Tensor,
    w: &Tensor,
    g: &[f64],
    need: [bool; 3],
) -> AffineGrads {
    let (n, din) = (x.shape()[0], x.shape()[1]);
    let dout = w.shape()[1];
    let dx = need[0].then(|| {
        let mut dx = vec![0.0; n * din];
        gemm(n, dout, din, g, false, w.data(), true, &mut dx, 0.0);
        dx
    });
    let dw = need[1].then(|| {
        let mut dw = vec![0.0; din * dout];
        gemm(din, n, dout, x.data(), true, g, false, &mut dw, 0.0);
        dw
    });
    let db = need[2].then(|| column_sums(g, n, dout));
    AffineGrads {
        x: dx,
        w: dw,
        b: db,
    }
}

fn column_sums(g: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut s = vec![0.0; cols];
    for r in 0..rows {
        for (acc, v) in s.iter_mut().zip(&g[r * cols..(r + 1) * cols]) {
            *acc += v;
        }
    }
    s
}

// ---------------------------------------------------------------- conv2d

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub ci: usize,
    pub kh: usize,
    pub kw: usize,
    pub co: usize,
    pub oh: usize,
    pub ow: usize,
    pub pad_y: usize,
    pub pad_x: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.n * self.oh * self.ow
    }

    fn patch(&self) -> usize {
        self.kh * self.kw * self.ci
    }
}

pub(crate) fn conv_geom(x: &Tensor, k: &Tensor, b: &Tensor, padding: Padding) -> Result<ConvGeom> {
    let (xs, ks, bs) = (x.shape(), k.shape(), b.shape());
    if xs.len() != 4 || ks.len() != 4 || bs.len() != 1 {
        return Err(Error::shape(
            "conv2d",
            format!("input {xs:?}, kernel {ks:?}, bias {bs:?}"),
        ));
    }
    let [n, h, w, ci] = [xs[0], xs[1], xs[2], xs[3]];
    let [kh, kw, kci, co] = [ks[0], ks[1], ks[2], ks[3]];
    if kci != ci {
        return Err(Error::shape(
            "conv2d",
            format!("input has {ci} channels, kernel expects {kci}"),
        ));
    }
    if bs[0] != co {
        return Err(Error::shape("conv2d", format!("bias {bs:?} vs {co} filters")));
    }
    let (oh, ow, pad_y, pad_x) = match padding {
        Padding::Same => {
            if kh % 2 == 0 || kw % 2 == 0 {
                return Err(Error::shape(
                    "conv2d",
                    format!("same padding needs odd kernel, got {kh}x{kw}"),
                ));
            }
            (h, w, kh / 2, kw / 2)
        }
        Padding::Valid => {
            if kh > h || kw > w {
                return Err(Error::shape(
                    "conv2d",
                    format!("kernel {kh}x{kw} larger than input {h}x{w}"),
                ));
            }
            (h - kh + 1, w - kw + 1, 0, 0)
        }
    };
    Ok(ConvGeom {
        n,
        h,
        w,
        ci,
        kh,
        kw,
        co,
        oh,
        ow,
        pad_y,
        pad_x,
    })
}

/// Unfolds every receptive field into a row of a `[n·oh·ow, kh·kw·ci]` matrix.
pub(crate) fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let patch = g.patch();
    let mut cols = vec![0.0; g.rows() * patch];
    let row_stride = g.w * g.ci;
    let img_stride = g.h * row_stride;
    let mut r = 0;
    for n in 0..g.n {
        let img = &x[n * img_stride..(n + 1) * img_stride];
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let dst = &mut cols[r * patch..(r + 1) * patch];
                for ky in 0..g.kh {
                    let iy = (oy + ky) as isize - g.pad_y as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    for kx in 0..g.kw {
                        let ix = (ox + kx) as isize - g.pad_x as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let src = iy * row_stride + ix as usize * g.ci;
                        let off = (ky * g.kw + kx) * g.ci;
                        dst[off..off + g.ci].copy_from_slice(&img[src..src + g.ci]);
                    }
                }
                r += 1;
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds patch rows back onto the image grid.
pub(crate) fn col2im(dcols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let patch = g.patch();
    let row_stride = g.w * g.ci;
    let img_stride = g.h * row_stride;
    let mut dx = vec![0.0; g.n * img_stride];
    let mut r = 0;
    for n in 0..g.n {
        let img = &mut dx[n * img_stride..(n + 1) * img_stride];
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let src = &dcols[r * patch..(r + 1) * patch];
                for ky in 0..g.kh {
                    let iy = (oy + ky) as isize - g.pad_y as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    for kx in 0..g.kw {
                        let ix = (ox + kx) as isize - g.pad_x as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let dst = iy * row_stride + ix as usize * g.ci;
                        let off = (ky * g.kw + kx) * g.ci;
                        for (d, s) in img[dst..dst + g.ci].iter_mut().zip(&src[off..off + g.ci]) {
                            *d += s;
                        }
                    }
                }
                r += 1;
            }
        }
    }
    dx
}

/// Forward convolution; also returns the unfolded input for the backward pass.
pub(crate) fn conv2d_forward(
    x: &Tensor,
    k: &Tensor,
    b: &Tensor,
    padding: Padding,
) -> Result<(Tensor, ConvGeom, Vec<f64>)> {
    let g = conv_geom(x, k, b, padding)?;
    let cols = im2col(x.data(), &g);
    let mut out = Vec::with_capacity(g.rows() * g.co);
    for _ in 0..g.rows() {
        out.extend_from_slice(b.data());
    }
    gemm(g.rows(), g.patch(), g.co, &cols, false, k.data(), false, &mut out, 1.0);
    let out = Tensor::checked("conv2d", vec![g.n, g.oh, g.ow, g.co], out)?;
    Ok((out, g, cols))
}

/// Stride-1 cross-correlation with zero `same` padding or no (`valid`) padding.
pub fn conv2d(x: &Tensor, k: &Tensor, b: &Tensor, padding: Padding) -> Result<Tensor> {
    conv2d_forward(x, k, b, padding).map(|(out, _, _)| out)
}

pub(crate) struct ConvGrads {
    pub x: Option<Vec<f64>>,
    pub k: Option<Vec<f64>>,
    pub b: Option<Vec<f64>>,
}

pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    cols: &[f64],
    k: &Tensor,
    dout: &[f64],
    need: [bool; 3],
) -> ConvGrads {
    let (m, p, co) = (g.rows(), g.patch(), g.co);
    let dx = need[0].then(|| {
        let mut dcols = vec![0.0; m * p];
        gemm(m, co, p, dout, false, k.data(), true, &mut dcols, 0.0);
        col2im(&dcols, g)
    });
    let dk = need[1].then(|| {
        let mut dk = vec![0.0; p * co];
        gemm(p, m, co, cols, true, dout, false, &mut dk, 0.0);
        dk
    });
    let db = need[2].then(|| column_sums(dout, m, co));
    ConvGrads {
        x: dx,
        k: dk,
        b: db,
    }
}

// ---------------------------------------------------------------- maxpool

/// 2×2 non-overlapping max pooling. Returns the output and, per output
/// element, the flat input index of the selected element. Ties go to the
/// lowest flat index.
pub(crate) fn maxpool2_forward(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::shape("maxpool2", format!("expected NHWC, got {s:?}")));
    }
    let [n, h, w, c] = [s[0], s[1], s[2], s[3]];
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(
            "maxpool2",
            format!("spatial dims must be even, got {h}x{w}"),
        ));
    }
    let (oh, ow) = (h / 2, w / 2);
    let xd = x.data();
    let mut out = Vec::with_capacity(n * oh * ow * c);
    let mut arg = Vec::with_capacity(n * oh * ow * c);
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let idx = |dy: usize, dx: usize| {
                        ((b * h + 2 * oy + dy) * w + 2 * ox + dx) * c + ch
                    };
                    let mut best = idx(0, 0);
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = idx(dy, dx);
                        if xd[i] > xd[best] {
                            best = i;
                        }
                    }
                    out.push(xd[best]);
                    arg.push(best);
                }
            }
        }
    }
    Ok((Tensor::from_parts(vec![n, oh, ow, c], out), arg))
}

pub fn maxpool2(x: &Tensor) -> Result<Tensor> {
    maxpool2_forward(x).map(|(out, _)| out)
}

pub(crate) fn maxpool2_backward(input_len: usize, argmax: &[usize], g: &[f64]) -> Vec<f64> {
    let mut dx = vec![0.0; input_len];
    for (&i, &gv) in argmax.iter().zip(g) {
        dx[i] += gv;
    }
    dx
}

// ---------------------------------------------------------------- relu

pub fn relu(x: &Tensor) -> Tensor {
    Tensor::from_parts(
        x.shape().to_vec(),
        x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
    )
}

/// Subgradient at 0 is 0.
pub(crate) fn relu_backward(x: &Tensor, g: &[f64]) -> Vec<f64> {
    x.data()
        .iter()
        .zip(g)
        .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
        .collect()
}

// ---------------------------------------------------------------- standardize

/// Per-image statistics for [`standardize`]: mean and the divisor
/// `max(stddev, 1/√d)`.
#[derive(Clone, Debug)]
pub(crate) struct StandardizeStats {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub floored: Vec<bool>,
}

pub(crate) fn standardize_forward(x: &Tensor) -> Result<(Tensor, StandardizeStats)> {
    let n = x.shape()[0];
    let d = x.row_len();
    let floor = 1.0 / (d as f64).sqrt();
    let mut out = Vec::with_capacity(x.len());
    let mut stats = StandardizeStats {
        mean: Vec::with_capacity(n),
        scale: Vec::with_capacity(n),
        floored: Vec::with_capacity(n),
    };
    for i in 0..n {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let std = var.sqrt();
        let floored = std <= floor;
        let scale = if floored { floor } else { std };
        out.extend(row.iter().map(|v| (v - mean) / scale));
        stats.mean.push(mean);
        stats.scale.push(scale);
        stats.floored.push(floored);
    }
    Ok((Tensor::checked("standardize", x.shape().to_vec(), out)?, stats))
}

/// Per-image `(x - mean) / max(stddev, 1/√d)`.
pub fn standardize(x: &Tensor) -> Result<Tensor> {
    standardize_forward(x).map(|(t, _)| t)
}

pub(crate) fn standardize_backward(y: &Tensor, stats: &StandardizeStats, g: &[f64]) -> Vec<f64> {
    let d = y.row_len();
    let mut dx = Vec::with_capacity(y.len());
    for i in 0..y.shape()[0] {
        let yr = y.row(i);
        let gr = &g[i * d..(i + 1) * d];
        let gmean = gr.iter().sum::<f64>() / d as f64;
        let s = stats.scale[i];
        if stats.floored[i] {
            dx.extend(gr.iter().map(|gv| (gv - gmean) / s));
        } else {
            let gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
            dx.extend(gr.iter().zip(yr).map(|(gv, yv)| (gv - gmean - yv * gy) / s));
        }
    }
    dx
}

// ---------------------------------------------------------------- losses

fn check_labels(logits: &Tensor, labels: &[usize]) -> Result<(usize, usize)> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::shape(
            "loss",
            format!("logits {s:?} vs {} labels", labels.len()),
        ));
    }
    let k = s[1];
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            classes: k,
        });
    }
    Ok((s[0], k))
}

/// Stable softmax of one row.
fn softmax_row(z: &[f64], out: &mut [f64]) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (o, &v) in out.iter_mut().zip(z) {
        *o = (v - m).exp();
        s += *o;
    }
    for o in out.iter_mut() {
        *o /= s;
    }
    m + s.ln()
}

/// Per-example cross-entropy `-log softmax(z)[y]` and the softmax matrix.
pub(crate) fn xent_forward(logits: &Tensor, labels: &[usize]) -> Result<(Vec<f64>, Vec<f64>)> {
    let (n, k) = check_labels(logits, labels)?;
    let mut probs = vec![0.0; n * k];
    let mut losses = Vec::with_capacity(n);
    for i in 0..n {
        let z = logits.row(i);
        let lse = softmax_row(z, &mut probs[i * k..(i + 1) * k]);
        losses.push(lse - z[labels[i]]);
    }
    if losses.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "softmax_xent" });
    }
    Ok((losses, probs))
}

/// Per-example cross-entropy losses.
pub fn xent_rows(logits: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
    xent_forward(logits, labels).map(|(l, _)| l)
}

/// Mean cross-entropy over the batch.
pub fn softmax_xent(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let rows = xent_rows(logits, labels)?;
    Ok(Tensor::scalar(rows.iter().sum::<f64>() / rows.len() as f64))
}

/// Highest logit other than `y` (lowest index on ties).
pub fn runner_up(z: &[f64], y: usize) -> usize {
    let mut best = usize::MAX;
    for (i, &v) in z.iter().enumerate() {
        if i != y && (best == usize::MAX || v > z[best]) {
            best = i;
        }
    }
    best
}

/// Index of the largest value (lowest index on ties).
pub fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate().skip(1) {
        if v > z[best] {
            best = i;
        }
    }
    best
}

/// Clipped wrong-class margin per example: `min(max_{i≠y} z_i − z_y, κ)`.
/// Also returns, per example, the competing class and whether the clip is
/// inactive (gradient flows).
pub(crate) fn cw_forward(
    logits: &Tensor,
    labels: &[usize],
    kappa: f64,
) -> Result<(Vec<f64>, Vec<(usize, bool)>)> {
    let (n, k) = check_labels(logits, labels)?;
    if k < 2 {
        return Err(Error::shape("cw_margin", "needs at least two classes"));
    }
    let mut vals = Vec::with_capacity(n);
    let mut info = Vec::with_capacity(n);
    for (i, &y) in labels.iter().enumerate() {
        let z = logits.row(i);
        let j = runner_up(z, y);
        let margin = z[j] - z[y];
        let active = margin < kappa;
        vals.push(if active { margin } else { kappa });
        info.push((j, active));
    }
    Ok((vals, info))
}

/// Per-example clipped margins, see [`cw_forward`].
pub fn cw_rows(logits: &Tensor, labels: &[usize], kappa: f64) -> Result<Vec<f64>> {
    cw_forward(logits, labels, kappa).map(|(v, _)| v)
}
