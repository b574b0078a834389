//! Depth losses (pixelwise and contrastive), the binary head and loss, and the overall weighting.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::depth::DepthMap;
use crate::error::{invalid, Error, Result};
use crate::kernels::{self, Padding};
use crate::ops;
use crate::params::{Bound, Param, ParamSet};
use crate::tape::{GradTape, Var};
use crate::tensor::{Shape, Tensor};

/// Class index of spoof samples in the binary head.
pub const SPOOF_CLASS: usize = 0;
/// Class index of live samples in the binary head.
pub const LIVE_CLASS: usize = 1;

/// The eight contrastive 3x3 masks. Mask `i` is -1 at the center and +1 at the
/// `i`-th neighbour in row-major order, top-left first.
#[derive(Clone, Debug, PartialEq)]
pub struct CdlKernels {
    masks: [[f64; 9]; 8],
}

impl Default for CdlKernels {
    fn default() -> Self {
        let mut masks = [[0.0; 9]; 8];
        let neighbours = [0, 1, 2, 3, 5, 6, 7, 8];
        for (mask, &n) in masks.iter_mut().zip(&neighbours) {
            mask[4] = -1.0;
            mask[n] = 1.0;
        }
        Self { masks }
    }
}

impl CdlKernels {
    /// Validated construction: each mask sums to zero with exactly two nonzero
    /// entries, and the positive positions are pairwise distinct.
    pub fn new(masks: [[f64; 9]; 8]) -> Result<Self> {
        let k = Self { masks };
        k.validate()?;
        Ok(k)
    }

    /// Skips validation. Used to exercise the kernel checks.
    #[doc(hidden)]
    pub fn from_masks_unchecked(masks: [[f64; 9]; 8]) -> Self {
        Self { masks }
    }

    pub fn masks(&self) -> &[[f64; 9]; 8] {
        &self.masks
    }

    pub fn sums(&self) -> [f64; 8] {
        self.masks.map(|m| m.iter().sum())
    }

    pub fn validate(&self) -> Result<()> {
        let mut positive = Vec::with_capacity(8);
        for (i, m) in self.masks.iter().enumerate() {
            let sum: f64 = m.iter().sum();
            if sum != 0.0 {
                return Err(invalid(format!("contrastive kernel {i} sums to {sum}, not 0")));
            }
            if m.iter().filter(|&&v| v != 0.0).count() != 2 {
                return Err(invalid(format!("contrastive kernel {i} must have two nonzero entries")));
            }
            positive.push(m.iter().position(|&v| v > 0.0));
        }
        for i in 0..8 {
            if positive[i + 1..].contains(&positive[i]) {
                return Err(invalid(format!("contrastive kernel {i} repeats a direction")));
            }
        }
        Ok(())
    }

    /// `(8, 1, 3, 3)` convolution weights.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_raw(Shape::new(8, 1, 3, 3), self.masks.concat())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    /// Squared L2 norm, summed over all terms.
    #[default]
    Sum,
    /// Sum divided by the number of terms.
    Mean,
}

/// Weight of the binary loss against the depth losses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { beta: 0.8 }
    }
}

impl LossWeights {
    pub fn new(beta: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&beta) {
            return Err(invalid(format!("beta must lie in [0, 1], got {beta}")));
        }
        Ok(Self { beta })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }
}

/// Summed squared difference of two depth maps.
pub fn edl(pred: &DepthMap, gt: &DepthMap) -> Result<f64> {
    pred.expect_same_size(gt, "edl")?;
    Ok(pred.data().iter().zip(gt.data()).map(|(p, g)| (p - g) * (p - g)).sum())
}

/// Contrastive depth loss with the standard kernels.
pub fn cdl(pred: &DepthMap, gt: &DepthMap) -> Result<f64> {
    cdl_with(&CdlKernels::default(), pred, gt)
}

pub fn cdl_with(kernels: &CdlKernels, pred: &DepthMap, gt: &DepthMap) -> Result<f64> {
    pred.expect_same_size(gt, "cdl")?;
    let k = kernels.to_tensor();
    let rp = ops::conv2d(&pred.to_tensor(), &k, 1, Padding::Same)?;
    let rg = ops::conv2d(&gt.to_tensor(), &k, 1, Padding::Same)?;
    Ok(rp.data().iter().zip(rg.data()).map(|(a, b)| (a - b) * (a - b)).sum())
}

fn reduce(tape: &mut GradTape, squared: Var, reduction: Reduction) -> Var {
    let n = tape.value(squared).numel() as f64;
    let total = tape.sum(squared);
    match reduction {
        Reduction::Sum => total,
        Reduction::Mean => tape.affine(total, 1.0 / n, 0.0),
    }
}

/// Differentiable EDL over `(1, 1, s, s)` values.
pub fn edl_on(tape: &mut GradTape, pred: Var, gt: Var, reduction: Reduction) -> Result<Var> {
    let diff = tape.sub(pred, gt)?;
    let sq = tape.square(diff);
    Ok(reduce(tape, sq, reduction))
}

/// Differentiable CDL over `(1, 1, s, s)` values.
pub fn cdl_on(tape: &mut GradTape, kernels: &CdlKernels, pred: Var, gt: Var, reduction: Reduction) -> Result<Var> {
    let k = tape.constant(kernels.to_tensor())?;
    let rp = tape.conv2d(pred, k, None, 1, Padding::Same)?;
    let rg = tape.conv2d(gt, k, None, 1, Padding::Same)?;
    let diff = tape.sub(rp, rg)?;
    let sq = tape.square(diff);
    Ok(reduce(tape, sq, reduction))
}

/// `beta * binary + (1 - beta) * (edl + cdl)`.
pub fn overall_loss(binary: f64, edl: f64, cdl: f64, beta: f64) -> f64 {
    beta * binary + (1.0 - beta) * (edl + cdl)
}

/// Two fully connected layers over the flattened averaged depth map, ending in two logits.
#[derive(Clone, Copy, Debug)]
pub struct FcsHead {
    pub inputs: usize,
    pub hidden: usize,
    pub w1: Param,
    pub b1: Param,
    pub w2: Param,
    pub b2: Param,
}

impl FcsHead {
    pub fn new<R: Rng + ?Sized>(params: &mut ParamSet, prefix: &str, inputs: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            inputs,
            hidden,
            w1: params.add_weight(format!("{prefix}.w1"), Shape::new(hidden, inputs, 1, 1), rng),
            b1: params.add(format!("{prefix}.b1"), Tensor::zeros(Shape::new(1, hidden, 1, 1))),
            w2: params.add_weight(format!("{prefix}.w2"), Shape::new(2, hidden, 1, 1), rng),
            b2: params.add(format!("{prefix}.b2"), Tensor::zeros(Shape::new(1, 2, 1, 1))),
        }
    }

    /// `(1, 2, 1, 1)` logits for a `(1, 1, s, s)` map.
    pub fn logits_on(&self, tape: &mut GradTape, bound: &Bound, map: Var) -> Result<Var> {
        let h = tape.linear(map, bound.var(self.w1), bound.var(self.b1))?;
        let h = tape.relu(h);
        tape.linear(h, bound.var(self.w2), bound.var(self.b2))
    }
}

/// Softmax probability of the live class from `(1, 2, 1, 1)` logits.
pub fn live_probability(logits: &Tensor) -> f64 {
    kernels::softmax_rows(logits.data(), 2)[LIVE_CLASS]
}

/// Cross-entropy of the head's prediction on the elementwise mean of `maps`.
/// Returns the loss and the logits.
pub fn binary_loss_on(
    tape: &mut GradTape,
    bound: &Bound,
    head: &FcsHead,
    maps: &[Var],
    live: bool,
) -> Result<(Var, Var)> {
    if maps.is_empty() {
        return Err(invalid("binary loss needs at least one refined map"));
    }
    let avg = tape.mean_of(maps)?;
    let logits = head.logits_on(tape, bound, avg)?;
    let label = if live { LIVE_CLASS } else { SPOOF_CLASS };
    let loss = tape.softmax_cross_entropy(logits, &[label])?;
    Ok((loss, logits))
}

/// Value-only [`binary_loss_on`].
pub fn binary_loss(maps: &[DepthMap], live: bool, head: &FcsHead, params: &ParamSet) -> Result<f64> {
    if let Some(first) = maps.first() {
        for m in maps {
            first.expect_same_size(m, "binary_loss")?;
        }
        if first.size() * first.size() != head.inputs {
            return Err(Error::ShapeMismatch {
                op: "binary_loss",
                left: Shape::new(1, 1, first.size(), first.size()),
                right: Shape::new(head.hidden, head.inputs, 1, 1),
            });
        }
    }
    let mut tape = GradTape::new();
    let bound = params.bind(&mut tape, false)?;
    let vars = maps
        .iter()
        .map(|m| tape.constant(m.to_tensor()))
        .collect::<Result<Vec<_>>>()?;
    let (loss, _) = binary_loss_on(&mut tape, &bound, head, &vars, live)?;
    tape.value(loss).item()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_map(size: usize, seed: u64) -> DepthMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DepthMap::new(size, (0..size * size).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn standard_kernels_are_valid() {
        let k = CdlKernels::default();
        k.validate().unwrap();
        assert_eq!(k.sums(), [0.0; 8]);
        assert_eq!(k.masks()[0], [1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(k.masks()[7][8], 1.0);
    }

    #[test]
    fn corrupt_kernels_are_rejected() {
        let mut masks = *CdlKernels::default().masks();
        masks[3][0] = 0.5;
        assert!(CdlKernels::new(masks).is_err());
        let mut masks = *CdlKernels::default().masks();
        masks[1] = masks[0];
        assert!(CdlKernels::new(masks).is_err());
        assert!(CdlKernels::from_masks_unchecked(masks).validate().is_err());
    }

    #[test]
    fn edl_offset_example() {
        let g = DepthMap::filled(32, 0.5).unwrap();
        let p = DepthMap::filled(32, 0.6).unwrap();
        assert!((edl(&p, &g).unwrap() - 10.24).abs() < 1e-9);
        assert_eq!(edl(&g, &g).unwrap(), 0.0);
        assert!(edl(&g, &DepthMap::filled(16, 0.5).unwrap()).is_err());
    }

    #[test]
    fn cdl_is_symmetric_and_zero_on_equal() {
        let a = random_map(8, 1);
        let b = random_map(8, 2);
        assert_eq!(cdl(&a, &a).unwrap(), 0.0);
        assert!((cdl(&a, &b).unwrap() - cdl(&b, &a).unwrap()).abs() < 1e-12);
        assert!(cdl(&a, &b).unwrap() > 0.0);
    }

    #[test]
    fn tape_losses_match_values() {
        let a = random_map(8, 3);
        let b = random_map(8, 4);
        let mut tape = GradTape::new();
        let pa = tape.constant(a.to_tensor()).unwrap();
        let pb = tape.constant(b.to_tensor()).unwrap();
        let e = edl_on(&mut tape, pa, pb, Reduction::Sum).unwrap();
        let c = cdl_on(&mut tape, &CdlKernels::default(), pa, pb, Reduction::Sum).unwrap();
        let em = edl_on(&mut tape, pa, pb, Reduction::Mean).unwrap();
        assert!((tape.value(e).item().unwrap() - edl(&a, &b).unwrap()).abs() < 1e-12);
        assert!((tape.value(c).item().unwrap() - cdl(&a, &b).unwrap()).abs() < 1e-12);
        assert!((tape.value(em).item().unwrap() * 64.0 - edl(&a, &b).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn overall_weighting() {
        assert_eq!(overall_loss(1.0, 2.0, 3.0, 0.8), 0.8 * 1.0 + (1.0 - 0.8) * (2.0 + 3.0));
        assert!((overall_loss(1.0, 2.0, 3.0, 0.8) - 1.8).abs() < 1e-15);
        assert_eq!(overall_loss(7.0, 2.0, 3.0, 0.0), 5.0);
        assert_eq!(overall_loss(7.0, 2.0, 3.0, 1.0), 7.0);
        assert!(LossWeights::new(1.2).is_err());
        assert_eq!(LossWeights::default().beta(), 0.8);
    }

    #[test]
    fn binary_loss_with_uniform_head_is_ln2() {
        let mut ps = ParamSet::new();
        let head = FcsHead::new(&mut ps, "fcs", 16, 4, &mut ChaCha8Rng::seed_from_u64(0));
        *ps.get_mut(head.w2) = Tensor::zeros(Shape::new(2, 4, 1, 1));
        let maps = vec![random_map(4, 1), random_map(4, 2)];
        let l = binary_loss(&maps, true, &head, &ps).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(binary_loss(&[], true, &head, &ps).is_err());
        assert!(binary_loss(&[random_map(3, 0)], true, &head, &ps).is_err());
    }
}
