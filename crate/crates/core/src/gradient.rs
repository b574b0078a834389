//! Sobel spatial gradients and the residual spatial-gradient block.

use rand::Rng;

use crate::error::{Error, Result};
use crate::kernels::Padding;
use crate::ops;
use crate::params::{Bound, Param, ParamSet};
use crate::tape::{GradTape, Var};
use crate::tensor::{Shape, Tensor};

#[rustfmt::skip]
pub const SOBEL_HORIZONTAL: [f64; 9] = [
    -1.0, 0.0, 1.0,
    -2.0, 0.0, 2.0,
    -1.0, 0.0, 1.0,
];

#[rustfmt::skip]
pub const SOBEL_VERTICAL: [f64; 9] = [
    -1.0, -2.0, -1.0,
     0.0,  0.0,  0.0,
     1.0,  2.0,  1.0,
];

/// The pair of 3x3 Sobel masks, shared across channels.
#[derive(Clone, Debug, PartialEq)]
pub struct SobelKernels {
    pub horizontal: Tensor,
    pub vertical: Tensor,
}

impl Default for SobelKernels {
    fn default() -> Self {
        let shape = Shape::new(1, 1, 3, 3);
        Self {
            horizontal: Tensor::from_raw(shape, SOBEL_HORIZONTAL.to_vec()),
            vertical: Tensor::from_raw(shape, SOBEL_VERTICAL.to_vec()),
        }
    }
}

impl SobelKernels {
    /// Each mask sums to zero and the vertical mask is the transpose of the horizontal one.
    pub fn is_consistent(&self) -> bool {
        let h = self.horizontal.data();
        let v = self.vertical.data();
        let transposed = (0..3).all(|r| (0..3).all(|c| v[r * 3 + c] == h[c * 3 + r]));
        h.iter().sum::<f64>() == 0.0 && v.iter().sum::<f64>() == 0.0 && transposed
    }
}

/// `F_hor(x)^2 + F_ver(x)^2` elementwise, no square root.
pub fn gradient_magnitude(x: &Tensor) -> Result<Tensor> {
    let k = SobelKernels::default();
    let gh = ops::depthwise_conv3x3(x, &k.horizontal)?;
    let gv = ops::depthwise_conv3x3(x, &k.vertical)?;
    gh.zip_map(&gv, "gradient_magnitude", |a, b| a * a + b * b)
}

/// Differentiable [`gradient_magnitude`].
pub fn gradient_magnitude_on(tape: &mut GradTape, x: Var) -> Result<Var> {
    let k = SobelKernels::default();
    let gh = tape.depthwise_conv3x3(x, &k.horizontal)?;
    let gv = tape.depthwise_conv3x3(x, &k.vertical)?;
    let gh2 = tape.square(gh);
    let gv2 = tape.square(gv);
    tape.add(gh2, gv2)
}

/// Handles for a per-channel normalization layer.
#[derive(Clone, Copy, Debug)]
pub struct NormParams {
    pub scale: Param,
    pub shift: Param,
}

impl NormParams {
    /// Scale starts at 1 and shift at 0.
    pub fn new(params: &mut ParamSet, prefix: &str, channels: usize) -> Self {
        let shape = Shape::new(1, channels, 1, 1);
        Self {
            scale: params.add(format!("{prefix}.scale"), Tensor::full(shape, 1.0)),
            shift: params.add(format!("{prefix}.shift"), Tensor::zeros(shape)),
        }
    }

    pub fn apply(&self, tape: &mut GradTape, bound: &Bound, x: Var) -> Result<Var> {
        tape.normalize(x, bound.var(self.scale), bound.var(self.shift))
    }
}

/// Residual spatial-gradient block:
/// `y = relu(N(conv3x3(x) + N(sobel_mag(conv1x1(x)))))`.
#[derive(Clone, Debug)]
pub struct RsgbBlock {
    pub in_channels: usize,
    pub out_channels: usize,
    /// 3x3 main-branch weights.
    pub main: Param,
    /// 1x1 channel-matching weights producing `x'`.
    pub project: Param,
    pub gradient_norm: NormParams,
    pub output_norm: NormParams,
}

impl RsgbBlock {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        prefix: &str,
        in_channels: usize,
        out_channels: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            in_channels,
            out_channels,
            main: params.add_weight(format!("{prefix}.main"), Shape::new(out_channels, in_channels, 3, 3), rng),
            project: params.add_weight(
                format!("{prefix}.project"),
                Shape::new(out_channels, in_channels, 1, 1),
                rng,
            ),
            gradient_norm: NormParams::new(params, &format!("{prefix}.gradient_norm"), out_channels),
            output_norm: NormParams::new(params, &format!("{prefix}.output_norm"), out_channels),
        }
    }

    pub fn forward_on(&self, tape: &mut GradTape, bound: &Bound, x: Var) -> Result<Var> {
        let shape = tape.value(x).shape();
        if shape.channels() != self.in_channels {
            return Err(Error::ShapeMismatch {
                op: "rsgb",
                left: shape,
                right: Shape::new(self.out_channels, self.in_channels, 3, 3),
            });
        }
        let main = tape.conv2d(x, bound.var(self.main), None, 1, Padding::Same)?;
        let projected = tape.conv2d(x, bound.var(self.project), None, 1, Padding::Same)?;
        let magnitude = gradient_magnitude_on(tape, projected)?;
        let gradient = self.gradient_norm.apply(tape, bound, magnitude)?;
        let sum = tape.add(main, gradient)?;
        let normed = self.output_norm.apply(tape, bound, sum)?;
        Ok(tape.relu(normed))
    }
}

/// Forward pass of one block without recording gradients.
pub fn rsgb_forward(block: &RsgbBlock, params: &ParamSet, x: &Tensor) -> Result<Tensor> {
    let mut tape = GradTape::new();
    let bound = params.bind(&mut tape, false)?;
    let xv = tape.constant(x.clone())?;
    let y = block.forward_on(&mut tape, &bound, xv)?;
    Ok(tape.value(y).clone())
}
