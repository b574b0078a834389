//! Raw forward/backward loops over NCHW buffers. Shapes are validated by callers.

use crate::error::{invalid, Error, Result};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding, output size `ceil(input / stride)`.
    Same,
    /// No padding, output size `floor((input - k) / stride) + 1`.
    Valid,
}

/// Resolved geometry of a 2-D cross-correlation.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub ho: usize,
    pub wo: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl ConvGeom {
    pub fn new(input: Shape, kernel: Shape, stride: usize, padding: Padding) -> Result<Self> {
        let [n, c, h, w] = input.0;
        let [o, kc, kh, kw] = kernel.0;
        if kc != c {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: input,
                right: kernel,
            });
        }
        if stride == 0 {
            return Err(invalid("conv2d stride must be >= 1"));
        }
        let (ho, wo, pad_top, pad_left) = match padding {
            Padding::Same => {
                if kh % 2 == 0 || kw % 2 == 0 {
                    return Err(invalid(format!(
                        "same padding needs odd kernel dims, got {kh}x{kw}"
                    )));
                }
                let ho = h.div_ceil(stride);
                let wo = w.div_ceil(stride);
                let pad_h = ((ho.saturating_sub(1)) * stride + kh).saturating_sub(h);
                let pad_w = ((wo.saturating_sub(1)) * stride + kw).saturating_sub(w);
                (ho, wo, pad_h / 2, pad_w / 2)
            }
            Padding::Valid => {
                if kh > h || kw > w {
                    return Err(Error::ShapeMismatch {
                        op: "conv2d (valid)",
                        left: input,
                        right: kernel,
                    });
                }
                ((h - kh) / stride + 1, (w - kw) / stride + 1, 0, 0)
            }
        };
        Ok(Self {
            n,
            c,
            h,
            w,
            o,
            kh,
            kw,
            stride,
            ho,
            wo,
            pad_top,
            pad_left,
        })
    }

    pub fn out_shape(&self) -> Shape {
        Shape::new(self.n, self.o, self.ho, self.wo)
    }

    /// Output columns `x` with `0 <= x * stride + j - pad < extent`.
    #[inline]
    fn valid_range(out: usize, extent: usize, k: usize, pad: usize, stride: usize) -> (usize, usize) {
        // x * stride >= pad - k  and  x * stride <= extent - 1 + pad - k
        let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
        let hi_num = extent + pad;
        let hi = if hi_num > k {
            ((hi_num - k - 1) / stride + 1).min(out)
        } else {
            0
        };
        (lo.min(hi), hi)
    }
}

/// Correlates one input plane with one kernel plane, accumulating into `out`.
#[inline]
fn correlate_plane(g: &ConvGeom, input: &[f64], kernel: &[f64], out: &mut [f64]) {
    for i in 0..g.kh {
        let (y0, y1) = ConvGeom::valid_range(g.ho, g.h, i, g.pad_top, g.stride);
        for j in 0..g.kw {
            let kv = kernel[i * g.kw + j];
            if kv == 0.0 {
                continue;
            }
            let (x0, x1) = ConvGeom::valid_range(g.wo, g.w, j, g.pad_left, g.stride);
            for y in y0..y1 {
                let iy = y * g.stride + i - g.pad_top;
                let in_row = &input[iy * g.w..(iy + 1) * g.w];
                let out_row = &mut out[y * g.wo..(y + 1) * g.wo];
                if g.stride == 1 {
                    let off = j as isize - g.pad_left as isize;
                    for x in x0..x1 {
                        out_row[x] += kv * in_row[(x as isize + off) as usize];
                    }
                } else {
                    for x in x0..x1 {
                        out_row[x] += kv * in_row[x * g.stride + j - g.pad_left];
                    }
                }
            }
        }
    }
}

/// Scatters `grad_out` back through the kernel onto `grad_in`.
#[inline]
fn correlate_plane_grad_input(g: &ConvGeom, grad_out: &[f64], kernel: &[f64], grad_in: &mut [f64]) {
    for i in 0..g.kh {
        let (y0, y1) = ConvGeom::valid_range(g.ho, g.h, i, g.pad_top, g.stride);
        for j in 0..g.kw {
            let kv = kernel[i * g.kw + j];
            if kv == 0.0 {
                continue;
            }
            let (x0, x1) = ConvGeom::valid_range(g.wo, g.w, j, g.pad_left, g.stride);
            for y in y0..y1 {
                let iy = y * g.stride + i - g.pad_top;
                let go_row = &grad_out[y * g.wo..(y + 1) * g.wo];
                let gi_row = &mut grad_in[iy * g.w..(iy + 1) * g.w];
                for x in x0..x1 {
                    gi_row[x * g.stride + j - g.pad_left] += kv * go_row[x];
                }
            }
        }
    }
}

/// Accumulates the kernel gradient for one (input plane, output plane) pair.
#[inline]
fn correlate_plane_grad_kernel(g: &ConvGeom, grad_out: &[f64], input: &[f64], grad_k: &mut [f64]) {
    for i in 0..g.kh {
        let (y0, y1) = ConvGeom::valid_range(g.ho, g.h, i, g.pad_top, g.stride);
        for j in 0..g.kw {
            let (x0, x1) = ConvGeom::valid_range(g.wo, g.w, j, g.pad_left, g.stride);
            let mut acc = 0.0;
            for y in y0..y1 {
                let iy = y * g.stride + i - g.pad_top;
                let go_row = &grad_out[y * g.wo..(y + 1) * g.wo];
                let in_row = &input[iy * g.w..(iy + 1) * g.w];
                for x in x0..x1 {
                    acc += go_row[x] * in_row[x * g.stride + j - g.pad_left];
                }
            }
            grad_k[i * g.kw + j] += acc;
        }
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeom, input: &[f64], weight: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let in_plane = g.h * g.w;
    let out_plane = g.ho * g.wo;
    let k_plane = g.kh * g.kw;
    let mut out = vec![0.0; g.n * g.o * out_plane];
    for b in 0..g.n {
        for o in 0..g.o {
            let dst = &mut out[(b * g.o + o) * out_plane..(b * g.o + o + 1) * out_plane];
            if let Some(bias) = bias {
                dst.fill(bias[o]);
            }
            for c in 0..g.c {
                let src = &input[(b * g.c + c) * in_plane..(b * g.c + c + 1) * in_plane];
                let k = &weight[(o * g.c + c) * k_plane..(o * g.c + c + 1) * k_plane];
                correlate_plane(g, src, k, dst);
            }
        }
    }
    out
}

pub(crate) fn conv2d_grad_input(g: &ConvGeom, grad_out: &[f64], weight: &[f64], grad_in: &mut [f64]) {
    let in_plane = g.h * g.w;
    let out_plane = g.ho * g.wo;
    let k_plane = g.kh * g.kw;
    for b in 0..g.n {
        for o in 0..g.o {
            let go = &grad_out[(b * g.o + o) * out_plane..(b * g.o + o + 1) * out_plane];
            for c in 0..g.c {
                let gi = &mut grad_in[(b * g.c + c) * in_plane..(b * g.c + c + 1) * in_plane];
                let k = &weight[(o * g.c + c) * k_plane..(o * g.c + c + 1) * k_plane];
                correlate_plane_grad_input(g, go, k, gi);
            }
        }
    }
}

pub(crate) fn conv2d_grad_weight(g: &ConvGeom, grad_out: &[f64], input: &[f64], grad_w: &mut [f64]) {
    let in_plane = g.h * g.w;
    let out_plane = g.ho * g.wo;
    let k_plane = g.kh * g.kw;
    for b in 0..g.n {
        for o in 0..g.o {
            let go = &grad_out[(b * g.o + o) * out_plane..(b * g.o + o + 1) * out_plane];
            for c in 0..g.c {
                let src = &input[(b * g.c + c) * in_plane..(b * g.c + c + 1) * in_plane];
                let gk = &mut grad_w[(o * g.c + c) * k_plane..(o * g.c + c + 1) * k_plane];
                correlate_plane_grad_kernel(g, go, src, gk);
            }
        }
    }
}

pub(crate) fn conv2d_grad_bias(g: &ConvGeom, grad_out: &[f64], grad_b: &mut [f64]) {
    let out_plane = g.ho * g.wo;
    for b in 0..g.n {
        for o in 0..g.o {
            grad_b[o] += grad_out[(b * g.o + o) * out_plane..(b * g.o + o + 1) * out_plane]
                .iter()
                .sum::<f64>();
        }
    }
}

/// Geometry of a same-padded 3x3 depthwise pass over `shape`.
pub(crate) fn depthwise_geom(shape: Shape) -> ConvGeom {
    let [n, c, h, w] = shape.0;
    ConvGeom {
        n,
        c,
        h,
        w,
        o: c,
        kh: 3,
        kw: 3,
        stride: 1,
        ho: h,
        wo: w,
        pad_top: 1,
        pad_left: 1,
    }
}

/// Kernel plane used for channel `c`: shared when only one plane is given.
#[inline]
fn depthwise_kernel(kernel: &[f64], c: usize) -> &[f64] {
    if kernel.len() == 9 {
        kernel
    } else {
        &kernel[c * 9..(c + 1) * 9]
    }
}

pub(crate) fn depthwise_forward(shape: Shape, input: &[f64], kernel: &[f64]) -> Vec<f64> {
    let g = depthwise_geom(shape);
    let plane = g.h * g.w;
    let mut out = vec![0.0; input.len()];
    for b in 0..g.n {
        for c in 0..g.c {
            let idx = (b * g.c + c) * plane;
            correlate_plane(
                &g,
                &input[idx..idx + plane],
                depthwise_kernel(kernel, c),
                &mut out[idx..idx + plane],
            );
        }
    }
    out
}

pub(crate) fn depthwise_grad_input(shape: Shape, grad_out: &[f64], kernel: &[f64], grad_in: &mut [f64]) {
    let g = depthwise_geom(shape);
    let plane = g.h * g.w;
    for b in 0..g.n {
        for c in 0..g.c {
            let idx = (b * g.c + c) * plane;
            correlate_plane_grad_input(
                &g,
                &grad_out[idx..idx + plane],
                depthwise_kernel(kernel, c),
                &mut grad_in[idx..idx + plane],
            );
        }
    }
}

/// 2x2 / stride-2 max pooling. Returns the output and the flat argmax of every output cell.
pub(crate) fn max_pool2x2_forward(shape: Shape, input: &[f64]) -> (Shape, Vec<f64>, Vec<usize>) {
    let [n, c, h, w] = shape.0;
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut argmax = Vec::with_capacity(n * c * ho * wo);
    for bc in 0..n * c {
        let base = bc * h * w;
        for y in 0..ho {
            for x in 0..wo {
                let cands = [
                    base + 2 * y * w + 2 * x,
                    base + 2 * y * w + 2 * x + 1,
                    base + (2 * y + 1) * w + 2 * x,
                    base + (2 * y + 1) * w + 2 * x + 1,
                ];
                let mut best = cands[0];
                for &i in &cands[1..] {
                    if input[i] > input[best] {
                        best = i;
                    }
                }
                out.push(input[best]);
                argmax.push(best);
            }
        }
    }
    (Shape::new(n, c, ho, wo), out, argmax)
}

/// Saved statistics of a per-channel normalization pass.
pub(crate) struct NormStats {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

/// Per-channel normalization over `(batch, height, width)`.
pub(crate) fn normalize_forward(
    shape: Shape,
    input: &[f64],
    scale: &[f64],
    shift: &[f64],
    eps: f64,
) -> (Vec<f64>, NormStats) {
    let [n, c, _, _] = shape.0;
    let plane = shape.plane();
    let count = (n * plane) as f64;
    let mut out = vec![0.0; input.len()];
    let mut xhat = vec![0.0; input.len()];
    let mut inv_std = vec![0.0; c];
    for ch in 0..c {
        let mut mean = 0.0;
        for b in 0..n {
            let base = (b * c + ch) * plane;
            mean += input[base..base + plane].iter().sum::<f64>();
        }
        mean /= count;
        let mut var = 0.0;
        for b in 0..n {
            let base = (b * c + ch) * plane;
            var += input[base..base + plane]
                .iter()
                .map(|v| (v - mean) * (v - mean))
                .sum::<f64>();
        }
        var /= count;
        let istd = 1.0 / (var + eps).sqrt();
        inv_std[ch] = istd;
        for b in 0..n {
            let base = (b * c + ch) * plane;
            for i in base..base + plane {
                let xh = (input[i] - mean) * istd;
                xhat[i] = xh;
                out[i] = scale[ch] * xh + shift[ch];
            }
        }
    }
    (out, NormStats { xhat, inv_std })
}

/// Returns `(grad_input, grad_scale, grad_shift)`.
pub(crate) fn normalize_backward(
    shape: Shape,
    grad_out: &[f64],
    stats: &NormStats,
    scale: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let [n, c, _, _] = shape.0;
    let plane = shape.plane();
    let count = (n * plane) as f64;
    let mut gx = vec![0.0; grad_out.len()];
    let mut gscale = vec![0.0; c];
    let mut gshift = vec![0.0; c];
    for ch in 0..c {
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for b in 0..n {
            let base = (b * c + ch) * plane;
            for i in base..base + plane {
                sum_g += grad_out[i];
                sum_gx += grad_out[i] * stats.xhat[i];
            }
        }
        gshift[ch] = sum_g;
        gscale[ch] = sum_gx;
        let k = scale[ch] * stats.inv_std[ch] / count;
        for b in 0..n {
            let base = (b * c + ch) * plane;
            for i in base..base + plane {
                gx[i] = k * (count * grad_out[i] - sum_g - stats.xhat[i] * sum_gx);
            }
        }
    }
    (gx, gscale, gshift)
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax of a `(n, k)` buffer.
pub(crate) fn softmax_rows(logits: &[f64], k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(k) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| e / z));
    }
    out
}

/// Validates kernel shape for a depthwise pass over `input`.
pub(crate) fn check_depthwise_kernel(input: Shape, kernel: &Tensor) -> Result<()> {
    let [kc, one, kh, kw] = kernel.shape().0;
    if kh != 3 || kw != 3 || one != 1 {
        return Err(invalid(format!(
            "depthwise kernel must be (c, 1, 3, 3), got {}",
            kernel.shape()
        )));
    }
    if kc != 1 && kc != input.channels() {
        return Err(Error::ShapeMismatch {
            op: "depthwise_conv3x3",
            left: input,
            right: kernel.shape(),
        });
    }
    Ok(())
}
