//! Short-term spatio-temporal blocks, ConvGRU propagation, the temporal depth head
//! and refinement of the coarse maps.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{pool_to, FrameFeatures};
use crate::depth::DepthMap;
use crate::error::{invalid, Error, Result};
use crate::gradient::gradient_magnitude_on;
use crate::kernels::Padding;
use crate::losses::{live_probability, FcsHead};
use crate::params::{Bound, Param, ParamSet};
use crate::tape::{GradTape, Var};
use crate::tensor::{Shape, Tensor};

/// Default refinement weight of the temporal map.
pub const DEFAULT_ALPHA: f64 = 0.6;

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(invalid(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    Ok(())
}

/// `(1 - alpha) * d_single + alpha * d_multi`, pointwise.
pub fn refine_depth(d_single: &DepthMap, d_multi: &DepthMap, alpha: f64) -> Result<DepthMap> {
    check_alpha(alpha)?;
    d_single.expect_same_size(d_multi, "refine_depth")?;
    let data = d_single
        .data()
        .iter()
        .zip(d_multi.data())
        .map(|(s, m)| ((1.0 - alpha) * s + alpha * m).clamp(s.min(*m), s.max(*m)))
        .collect();
    DepthMap::new(d_single.size(), data)
}

/// One short-term spatio-temporal block at a backbone level.
#[derive(Clone, Debug)]
pub struct StstbBlock {
    pub level: usize,
    pub in_channels: usize,
    pub compress_channels: usize,
    pub fusion_channels: usize,
    pub compress: Param,
    pub fuse: Param,
    pub fuse_bias: Param,
}

/// Intermediate values of one block evaluation.
#[derive(Clone, Copy, Debug)]
pub struct StstbVars {
    pub compressed: Var,
    pub spatial: Var,
    pub spatial_next: Var,
    pub temporal: Var,
    pub previous: Var,
    pub fused: Var,
}

impl StstbBlock {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        level: usize,
        in_channels: usize,
        compress_channels: usize,
        fusion_channels: usize,
        rng: &mut R,
    ) -> Self {
        let prefix = format!("ststb{level}");
        let fused_in = 4 * compress_channels + fusion_channels;
        Self {
            level,
            in_channels,
            compress_channels,
            fusion_channels,
            compress: params.add_weight(
                format!("{prefix}.compress"),
                Shape::new(compress_channels, in_channels, 1, 1),
                rng,
            ),
            fuse: params.add_weight(format!("{prefix}.fuse"), Shape::new(fusion_channels, fused_in, 1, 1), rng),
            fuse_bias: params.add(format!("{prefix}.fuse.bias"), Tensor::zeros(Shape::new(1, fusion_channels, 1, 1))),
        }
    }

    /// Fuses `[F(t), F^S(t), F^S(t+1), F^T(t), prev]` where `prev` is the previous
    /// level's block output pooled to this level's resolution, or zeros.
    pub fn forward_on(
        &self,
        tape: &mut GradTape,
        bound: &Bound,
        feat: Var,
        feat_next: Var,
        prev: Option<Var>,
    ) -> Result<StstbVars> {
        let s = tape.value(feat).shape();
        let sn = tape.value(feat_next).shape();
        if s != sn {
            return Err(Error::ShapeMismatch {
                op: "ststb temporal pair",
                left: s,
                right: sn,
            });
        }
        let compressed = tape.conv2d(feat, bound.var(self.compress), None, 1, Padding::Same)?;
        let compressed_next = tape.conv2d(feat_next, bound.var(self.compress), None, 1, Padding::Same)?;
        let spatial = gradient_magnitude_on(tape, compressed)?;
        let spatial_next = gradient_magnitude_on(tape, compressed_next)?;
        let temporal = tape.sub(compressed_next, compressed)?;
        let previous = match prev {
            Some(p) => {
                let pooled = pool_to(tape, p, s.height())?;
                let ps = tape.value(pooled).shape();
                if ps.channels() != self.fusion_channels || ps.width() != s.width() {
                    return Err(Error::ShapeMismatch {
                        op: "ststb previous level",
                        left: ps,
                        right: Shape::new(1, self.fusion_channels, s.height(), s.width()),
                    });
                }
                pooled
            }
            None => tape.constant(Tensor::zeros(Shape::new(1, self.fusion_channels, s.height(), s.width())))?,
        };
        let cat = tape.concat_channels(&[compressed, spatial, spatial_next, temporal, previous])?;
        let fused = tape.conv2d(cat, bound.var(self.fuse), Some(bound.var(self.fuse_bias)), 1, Padding::Same)?;
        let fused = tape.relu(fused);
        Ok(StstbVars {
            compressed,
            spatial,
            spatial_next,
            temporal,
            previous,
            fused,
        })
    }
}

/// Value-only block evaluation; returns the fused output.
pub fn ststb_forward(
    block: &StstbBlock,
    params: &ParamSet,
    feat: &Tensor,
    feat_next: &Tensor,
    prev: Option<&Tensor>,
) -> Result<Tensor> {
    let mut tape = GradTape::new();
    let bound = params.bind(&mut tape, false)?;
    let a = tape.constant(feat.clone())?;
    let b = tape.constant(feat_next.clone())?;
    let p = prev.map(|t| tape.constant(t.clone())).transpose()?;
    let out = block.forward_on(&mut tape, &bound, a, b, p)?;
    Ok(tape.value(out.fused).clone())
}

/// Convolutional GRU with 3x3 gate kernels over `[H, X]`.
#[derive(Clone, Debug)]
pub struct ConvGruCell {
    pub input_channels: usize,
    pub hidden_channels: usize,
    pub reset: Param,
    pub reset_bias: Param,
    pub update: Param,
    pub update_bias: Param,
    pub candidate: Param,
    pub candidate_bias: Param,
}

#[derive(Clone, Copy, Debug)]
pub struct GruVars {
    pub reset: Var,
    pub update: Var,
    pub candidate: Var,
    pub hidden: Var,
}

/// Tensor values of one GRU step.
#[derive(Clone, Debug)]
pub struct GruStep {
    pub reset: Tensor,
    pub update: Tensor,
    pub candidate: Tensor,
    pub hidden: Tensor,
}

impl ConvGruCell {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        prefix: &str,
        input_channels: usize,
        hidden_channels: usize,
        rng: &mut R,
    ) -> Self {
        let k = Shape::new(hidden_channels, hidden_channels + input_channels, 3, 3);
        let b = Shape::new(1, hidden_channels, 1, 1);
        Self {
            input_channels,
            hidden_channels,
            reset: params.add_weight(format!("{prefix}.reset"), k, rng),
            reset_bias: params.add(format!("{prefix}.reset.bias"), Tensor::zeros(b)),
            update: params.add_weight(format!("{prefix}.update"), k, rng),
            update_bias: params.add(format!("{prefix}.update.bias"), Tensor::zeros(b)),
            candidate: params.add_weight(format!("{prefix}.candidate"), k, rng),
            candidate_bias: params.add(format!("{prefix}.candidate.bias"), Tensor::zeros(b)),
        }
    }

    pub fn step_on(&self, tape: &mut GradTape, bound: &Bound, h_prev: Var, x: Var) -> Result<GruVars> {
        let hs = tape.value(h_prev).shape();
        let xs = tape.value(x).shape();
        if hs.channels() != self.hidden_channels
            || xs.channels() != self.input_channels
            || hs.height() != xs.height()
            || hs.width() != xs.width()
            || hs.batch() != xs.batch()
        {
            return Err(Error::ShapeMismatch {
                op: "convgru_step",
                left: hs,
                right: xs,
            });
        }
        let hx = tape.concat_channels(&[h_prev, x])?;
        let r = tape.conv2d(hx, bound.var(self.reset), Some(bound.var(self.reset_bias)), 1, Padding::Same)?;
        let reset = tape.sigmoid(r);
        let u = tape.conv2d(hx, bound.var(self.update), Some(bound.var(self.update_bias)), 1, Padding::Same)?;
        let update = tape.sigmoid(u);
        let gated = tape.mul(reset, h_prev)?;
        let gx = tape.concat_channels(&[gated, x])?;
        let c = tape.conv2d(
            gx,
            bound.var(self.candidate),
            Some(bound.var(self.candidate_bias)),
            1,
            Padding::Same,
        )?;
        let candidate = tape.tanh(c);
        let keep = tape.affine(update, -1.0, 1.0);
        let kept = tape.mul(keep, h_prev)?;
        let fresh = tape.mul(update, candidate)?;
        let hidden = tape.add(kept, fresh)?;
        Ok(GruVars {
            reset,
            update,
            candidate,
            hidden,
        })
    }
}

/// All gate values of one step.
pub fn convgru_gates(cell: &ConvGruCell, params: &ParamSet, h_prev: &Tensor, x: &Tensor) -> Result<GruStep> {
    let mut tape = GradTape::new();
    let bound = params.bind(&mut tape, false)?;
    let h = tape.constant(h_prev.clone())?;
    let xv = tape.constant(x.clone())?;
    let v = cell.step_on(&mut tape, &bound, h, xv)?;
    Ok(GruStep {
        reset: tape.value(v.reset).clone(),
        update: tape.value(v.update).clone(),
        candidate: tape.value(v.candidate).clone(),
        hidden: tape.value(v.hidden).clone(),
    })
}

/// Next hidden state.
pub fn convgru_step(cell: &ConvGruCell, params: &ParamSet, h_prev: &Tensor, x: &Tensor) -> Result<Tensor> {
    Ok(convgru_gates(cell, params, h_prev, x)?.hidden)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StpmConfig {
    pub compress_channels: usize,
    pub fusion_channels: usize,
    pub hidden_channels: usize,
    pub fcs_hidden: usize,
    pub alpha: f64,
}

impl Default for StpmConfig {
    fn default() -> Self {
        Self {
            compress_channels: 32,
            fusion_channels: 32,
            hidden_channels: 32,
            fcs_hidden: 128,
            alpha: DEFAULT_ALPHA,
        }
    }
}

impl StpmConfig {
    pub fn desk() -> Self {
        Self {
            compress_channels: 8,
            fusion_channels: 16,
            hidden_channels: 16,
            fcs_hidden: 32,
            alpha: DEFAULT_ALPHA,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha).map_err(|e| Error::Config(e.to_string()))?;
        if self.compress_channels == 0 || self.fusion_channels == 0 || self.hidden_channels == 0 || self.fcs_hidden == 0 {
            return Err(Error::Config("stpm channel counts must be positive".into()));
        }
        Ok(())
    }
}

/// Temporal module: per-level blocks, recurrence, temporal head and binary head.
#[derive(Clone, Debug)]
pub struct Stpm {
    config: StpmConfig,
    depth_size: usize,
    params: ParamSet,
    blocks: Vec<StstbBlock>,
    gru: ConvGruCell,
    head: Param,
    head_bias: Param,
    fcs: FcsHead,
}

#[derive(Clone, Debug)]
pub struct StpmOutput {
    pub d_multi: Vec<Var>,
    pub refined: Vec<Var>,
    pub logits: Var,
}

/// Detached predictions for one clip.
#[derive(Clone, Debug)]
pub struct ClipPrediction {
    pub d_single: Vec<DepthMap>,
    pub d_multi: Vec<DepthMap>,
    pub refined: Vec<DepthMap>,
    pub live_probability: f64,
}

impl Stpm {
    pub fn new(config: StpmConfig, level_channels: &[usize], depth_size: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if level_channels.is_empty() {
            return Err(Error::Config("stpm needs at least one backbone level".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let blocks = level_channels
            .iter()
            .enumerate()
            .map(|(l, &c)| {
                StstbBlock::new(
                    &mut params,
                    l,
                    c,
                    config.compress_channels,
                    config.fusion_channels,
                    &mut rng,
                )
            })
            .collect();
        let gru = ConvGruCell::new(&mut params, "gru", config.fusion_channels, config.hidden_channels, &mut rng);
        let head = params.add_weight("temporal_head", Shape::new(1, config.hidden_channels, 1, 1), &mut rng);
        let head_bias = params.add("temporal_head.bias", Tensor::zeros(Shape::new(1, 1, 1, 1)));
        let fcs = FcsHead::new(&mut params, "fcs", depth_size * depth_size, config.fcs_hidden, &mut rng);
        Ok(Self {
            config,
            depth_size,
            params,
            blocks,
            gru,
            head,
            head_bias,
            fcs,
        })
    }

    pub fn config(&self) -> &StpmConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn fcs(&self) -> &FcsHead {
        &self.fcs
    }

    pub fn gru(&self) -> &ConvGruCell {
        &self.gru
    }

    pub fn blocks(&self) -> &[StstbBlock] {
        &self.blocks
    }

    /// Runs the clip; emits one temporal and one refined map per consecutive frame pair.
    pub fn forward_on(&self, tape: &mut GradTape, bound: &Bound, clip: &[FrameFeatures]) -> Result<StpmOutput> {
        if clip.len() < 2 {
            return Err(invalid(format!("stpm needs at least 2 frames, got {}", clip.len())));
        }
        let mut frames = Vec::with_capacity(clip.len());
        for f in clip {
            if f.levels.len() != self.blocks.len() {
                return Err(invalid(format!(
                    "expected {} feature levels, got {}",
                    self.blocks.len(),
                    f.levels.len()
                )));
            }
            let levels = f
                .levels
                .iter()
                .map(|t| tape.constant(t.clone()))
                .collect::<Result<Vec<_>>>()?;
            frames.push((levels, tape.constant(f.depth.clone())?));
        }
        let ds = self.depth_size;
        let mut h = tape.constant(Tensor::zeros(Shape::new(1, self.config.hidden_channels, ds, ds)))?;
        let alpha = self.config.alpha;
        let mut d_multi = Vec::with_capacity(clip.len() - 1);
        let mut refined = Vec::with_capacity(clip.len() - 1);
        for pair in frames.windows(2) {
            let (cur, next) = (&pair[0], &pair[1]);
            let mut prev = None;
            for (l, block) in self.blocks.iter().enumerate() {
                let out = block.forward_on(tape, bound, cur.0[l], next.0[l], prev)?;
                prev = Some(out.fused);
            }
            let x = pool_to(tape, prev.expect("at least one level"), ds)?;
            h = self.gru.step_on(tape, bound, h, x)?.hidden;
            let logit = tape.conv2d(h, bound.var(self.head), Some(bound.var(self.head_bias)), 1, Padding::Same)?;
            let dm = tape.sigmoid(logit);
            let a = tape.affine(cur.1, 1.0 - alpha, 0.0);
            let b = tape.affine(dm, alpha, 0.0);
            refined.push(tape.add(a, b)?);
            d_multi.push(dm);
        }
        let avg = tape.mean_of(&refined)?;
        let logits = self.fcs.logits_on(tape, bound, avg)?;
        Ok(StpmOutput {
            d_multi,
            refined,
            logits,
        })
    }

    pub fn predict(&self, clip: &[FrameFeatures]) -> Result<ClipPrediction> {
        let mut tape = GradTape::new();
        let bound = self.params.bind(&mut tape, false)?;
        let out = self.forward_on(&mut tape, &bound, clip)?;
        let maps = |vars: &[Var], tape: &GradTape| {
            vars.iter()
                .map(|&v| DepthMap::from_tensor(&tape.value(v).map(|d| d.clamp(0.0, 1.0))))
                .collect::<Result<Vec<_>>>()
        };
        Ok(ClipPrediction {
            d_single: clip
                .iter()
                .map(|f| DepthMap::from_tensor(&f.depth))
                .collect::<Result<_>>()?,
            d_multi: maps(&out.d_multi, &tape)?,
            refined: maps(&out.refined, &tape)?,
            live_probability: live_probability(tape.value(out.logits)),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random(shape: Shape, seed: u64) -> Tensor {
        Tensor::uniform(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn block() -> (ParamSet, StstbBlock) {
        let mut ps = ParamSet::new();
        let b = StstbBlock::new(&mut ps, 1, 3, 2, 5, &mut ChaCha8Rng::seed_from_u64(1));
        (ps, b)
    }

    #[test]
    fn refine_endpoints_and_example() {
        let s = DepthMap::filled(4, 0.5).unwrap();
        let m = DepthMap::filled(4, 1.0).unwrap();
        assert_eq!(refine_depth(&s, &m, 0.0).unwrap(), s);
        assert_eq!(refine_depth(&s, &m, 1.0).unwrap(), m);
        let r = refine_depth(&s, &m, 0.6).unwrap();
        assert!(r.data().iter().all(|v| (v - 0.8).abs() < 1e-15));
        assert!(refine_depth(&s, &m, 1.5).is_err());
        assert!(refine_depth(&s, &m, -0.1).is_err());
    }

    #[test]
    fn ststb_slices() {
        let (ps, b) = block();
        let f = random(Shape::new(1, 3, 8, 8), 2);
        let mut tape = GradTape::new();
        let bound = ps.bind(&mut tape, false).unwrap();
        let a = tape.constant(f.clone()).unwrap();
        let c = tape.constant(f).unwrap();
        let out = b.forward_on(&mut tape, &bound, a, c, None).unwrap();
        assert_eq!(tape.value(out.temporal).max_abs(), 0.0);
        assert_eq!(tape.value(out.previous).max_abs(), 0.0);
        assert_eq!(tape.value(out.fused).shape(), Shape::new(1, 5, 8, 8));

        let k = Tensor::full(Shape::new(1, 3, 8, 8), 0.3);
        let mut tape = GradTape::new();
        let bound = ps.bind(&mut tape, false).unwrap();
        let a = tape.constant(k.clone()).unwrap();
        let c = tape.constant(k).unwrap();
        let out = b.forward_on(&mut tape, &bound, a, c, None).unwrap();
        let s = tape.value(out.spatial);
        for ch in 0..2 {
            for h in 1..7 {
                for w in 1..7 {
                    // Sobel taps summed in float leave at most a few ulps before squaring.
                    assert!(s.at(0, ch, h, w) < 1e-24);
                }
            }
        }
    }

    #[test]
    fn ststb_width_with_and_without_prev() {
        let (ps, b) = block();
        let f = random(Shape::new(1, 3, 8, 8), 3);
        let g = random(Shape::new(1, 3, 8, 8), 4);
        let prev = random(Shape::new(1, 5, 16, 16), 5).map(f64::abs);
        let a = ststb_forward(&b, &ps, &f, &g, None).unwrap();
        let c = ststb_forward(&b, &ps, &f, &g, Some(&prev)).unwrap();
        assert_eq!(a.shape(), c.shape());
        assert!(ststb_forward(&b, &ps, &f, &random(Shape::new(1, 3, 4, 4), 6), None).is_err());
    }

    fn cell() -> (ParamSet, ConvGruCell) {
        let mut ps = ParamSet::new();
        let c = ConvGruCell::new(&mut ps, "gru", 3, 4, &mut ChaCha8Rng::seed_from_u64(7));
        (ps, c)
    }

    #[test]
    fn gru_update_gate_overrides() {
        let (mut ps, c) = cell();
        let h = random(Shape::new(1, 4, 6, 6), 8);
        let x = random(Shape::new(1, 3, 6, 6), 9);
        ps.get_mut(c.update_bias).data_mut().fill(-30.0);
        let step = convgru_gates(&c, &ps, &h, &x).unwrap();
        for (a, b) in step.hidden.data().iter().zip(h.data()) {
            assert!((a - b).abs() < 1e-9);
        }
        ps.get_mut(c.update_bias).data_mut().fill(30.0);
        let step = convgru_gates(&c, &ps, &h, &x).unwrap();
        for (a, b) in step.hidden.data().iter().zip(step.candidate.data()) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!(convgru_step(&c, &ps, &h, &random(Shape::new(1, 2, 6, 6), 1)).is_err());
    }

    #[test]
    fn gru_gates_in_open_unit_interval() {
        let (ps, c) = cell();
        let step = convgru_gates(
            &c,
            &ps,
            &random(Shape::new(1, 4, 5, 5), 1),
            &random(Shape::new(1, 3, 5, 5), 2),
        )
        .unwrap();
        for g in [&step.reset, &step.update] {
            assert!(g.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
        assert!(step.hidden.data().iter().all(|&v| v > -1.0 && v < 1.0));
    }

    fn clip(frames: usize, seed: u64) -> Vec<FrameFeatures> {
        (0..frames)
            .map(|i| FrameFeatures {
                levels: vec![
                    random(Shape::new(1, 2, 8, 8), seed + 10 * i as u64),
                    random(Shape::new(1, 3, 4, 4), seed + 10 * i as u64 + 1),
                ],
                depth: random(Shape::new(1, 1, 4, 4), seed + 10 * i as u64 + 2).map(|v| v.abs()),
            })
            .collect()
    }

    #[test]
    fn stpm_emits_one_map_per_transition() {
        let cfg = StpmConfig {
            compress_channels: 2,
            fusion_channels: 3,
            hidden_channels: 3,
            fcs_hidden: 4,
            alpha: 0.6,
        };
        let stpm = Stpm::new(cfg, &[2, 3], 4, 3).unwrap();
        let p = stpm.predict(&clip(5, 100)).unwrap();
        assert_eq!(p.refined.len(), 4);
        assert_eq!(p.d_multi.len(), 4);
        assert!(p.live_probability > 0.0 && p.live_probability < 1.0);
        assert!(stpm.predict(&clip(1, 100)).is_err());

        let mut reversed = clip(5, 100);
        reversed.reverse();
        let q = stpm.predict(&reversed).unwrap();
        assert_ne!(p.d_multi.last(), q.d_multi.last());
    }
}
