//! Forward-only tensor operators. The differentiable versions live on [`GradTape`](crate::tape::GradTape).

use crate::error::{invalid, Error, Result};
use crate::kernels::{self, ConvGeom, Padding};
use crate::tensor::{Shape, Tensor};

/// Epsilon added to the variance in [`normalize_channels`].
pub const NORM_EPS: f64 = 1e-5;

/// Cross-correlation (kernel not flipped) of `input` with `(out, in, kh, kw)` kernels.
pub fn conv2d(input: &Tensor, kernels: &Tensor, stride: usize, padding: Padding) -> Result<Tensor> {
    input.expect_finite("conv2d input")?;
    let g = ConvGeom::new(input.shape(), kernels.shape(), stride, padding)?;
    let out = kernels::conv2d_forward(&g, input.data(), kernels.data(), None);
    Ok(Tensor::from_raw(g.out_shape(), out))
}

/// Same-padded 3x3 correlation applied channel by channel.
///
/// `kernel` is `(1, 1, 3, 3)` to share one mask across channels or `(c, 1, 3, 3)` for one per channel.
pub fn depthwise_conv3x3(input: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    input.expect_finite("depthwise input")?;
    kernels::check_depthwise_kernel(input.shape(), kernel)?;
    Ok(Tensor::from_raw(
        input.shape(),
        kernels::depthwise_forward(input.shape(), input.data(), kernel.data()),
    ))
}

pub fn max_pool2x2(input: &Tensor) -> Result<Tensor> {
    let s = input.shape();
    if s.height() < 2 || s.width() < 2 {
        return Err(invalid(format!("max_pool2x2 needs spatial dims >= 2, got {s}")));
    }
    let (shape, out, _) = kernels::max_pool2x2_forward(s, input.data());
    Ok(Tensor::from_raw(shape, out))
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

pub fn sigmoid(input: &Tensor) -> Tensor {
    input.map(kernels::sigmoid)
}

pub fn tanh_op(input: &Tensor) -> Tensor {
    input.map(f64::tanh)
}

/// Per-channel normalization with statistics over `(batch, height, width)`, then `scale * x + shift`.
pub fn normalize_channels(input: &Tensor, scale: &Tensor, shift: &Tensor) -> Result<Tensor> {
    let c = input.shape().channels();
    let expect = Shape::new(1, c, 1, 1);
    for p in [scale, shift] {
        if p.shape() != expect {
            return Err(Error::ShapeMismatch {
                op: "normalize_channels",
                left: input.shape(),
                right: p.shape(),
            });
        }
    }
    let (out, _) = kernels::normalize_forward(input.shape(), input.data(), scale.data(), shift.data(), NORM_EPS);
    Ok(Tensor::from_raw(input.shape(), out))
}

/// Channel-wise concatenation.
pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| invalid("concat of zero tensors"))?;
    let [n, _, h, w] = first.shape().0;
    let mut total = 0;
    for p in parts {
        let [pn, pc, ph, pw] = p.shape().0;
        if (pn, ph, pw) != (n, h, w) {
            return Err(Error::ShapeMismatch {
                op: "concat_channels",
                left: first.shape(),
                right: p.shape(),
            });
        }
        total += pc;
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(n * total * plane);
    for b in 0..n {
        for p in parts {
            let pc = p.shape().channels();
            out.extend_from_slice(&p.data()[b * pc * plane..(b + 1) * pc * plane]);
        }
    }
    Ok(Tensor::from_raw(Shape::new(n, total, h, w), out))
}
