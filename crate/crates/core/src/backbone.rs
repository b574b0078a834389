//! Single-frame backbone: a stem, three levels of cascaded residual spatial-gradient
//! blocks with pooling, and a depth head over the multi-level features.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::depth::DepthMap;
use crate::error::{invalid, Error, Result};
use crate::gradient::{NormParams, RsgbBlock};
use crate::kernels::Padding;
use crate::params::{Bound, Param, ParamSet};
use crate::tape::{GradTape, Var};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelConfig {
    pub channels: usize,
    pub blocks: usize,
    /// Apply a 2x2 max pool after the blocks of this level.
    pub pool: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub input_size: usize,
    pub input_channels: usize,
    pub stem_channels: usize,
    /// Low, mid and high levels, in order.
    pub levels: Vec<LevelConfig>,
    pub head_channels: usize,
    pub depth_size: usize,
}

impl Default for BackboneConfig {
    /// 256x256 RGB in, 32x32 depth out.
    fn default() -> Self {
        let level = |channels| LevelConfig {
            channels,
            blocks: 3,
            pool: true,
        };
        Self {
            input_size: 256,
            input_channels: 3,
            stem_channels: 64,
            levels: vec![level(128), level(196), level(128)],
            head_channels: 64,
            depth_size: 32,
        }
    }
}

impl BackboneConfig {
    /// 64x64 in, 16x16 depth out, at most 16 channels.
    pub fn desk() -> Self {
        Self {
            input_size: 64,
            input_channels: 3,
            stem_channels: 8,
            levels: vec![
                LevelConfig {
                    channels: 8,
                    blocks: 1,
                    pool: true,
                },
                LevelConfig {
                    channels: 16,
                    blocks: 1,
                    pool: true,
                },
                LevelConfig {
                    channels: 16,
                    blocks: 1,
                    pool: false,
                },
            ],
            head_channels: 16,
            depth_size: 16,
        }
    }

    /// 32x32 in, 16x16 depth out; for fast single-sample runs.
    pub fn tiny() -> Self {
        Self {
            input_size: 32,
            input_channels: 3,
            stem_channels: 4,
            levels: vec![
                LevelConfig {
                    channels: 4,
                    blocks: 1,
                    pool: false,
                },
                LevelConfig {
                    channels: 8,
                    blocks: 1,
                    pool: true,
                },
                LevelConfig {
                    channels: 8,
                    blocks: 1,
                    pool: false,
                },
            ],
            head_channels: 8,
            depth_size: 16,
        }
    }

    /// Spatial side of each level's output.
    pub fn level_sizes(&self) -> Vec<usize> {
        let mut size = self.input_size;
        self.levels
            .iter()
            .map(|l| {
                if l.pool {
                    size /= 2;
                }
                size
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::Config("backbone needs at least one level".into()));
        }
        if self.depth_size == 0 || self.input_size == 0 {
            return Err(Error::Config("input and depth sizes must be positive".into()));
        }
        let pools = self.levels.iter().filter(|l| l.pool).count();
        if !self.input_size.is_multiple_of(1 << pools) {
            return Err(Error::Config(format!(
                "input size {} is not divisible by 2^{pools} for the pooling chain",
                self.input_size
            )));
        }
        for (i, size) in self.level_sizes().into_iter().enumerate() {
            if size < self.depth_size || size % self.depth_size != 0 || !(size / self.depth_size).is_power_of_two() {
                return Err(Error::Config(format!(
                    "level {i} resolution {size} cannot be pooled down to the {} depth grid",
                    self.depth_size
                )));
            }
        }
        if self.levels.iter().any(|l| l.channels == 0) || self.stem_channels == 0 || self.head_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        Ok(())
    }
}

/// Applies 2x2 max pooling until the spatial side equals `size`.
pub(crate) fn pool_to(tape: &mut GradTape, mut x: Var, size: usize) -> Result<Var> {
    while tape.value(x).shape().height() > size {
        x = tape.max_pool2x2(x)?;
    }
    if tape.value(x).shape().height() != size {
        return Err(invalid(format!(
            "cannot pool {} down to side {size}",
            tape.value(x).shape()
        )));
    }
    Ok(x)
}

#[derive(Clone, Debug)]
pub struct Backbone {
    config: BackboneConfig,
    params: ParamSet,
    stem: Param,
    stem_norm: NormParams,
    levels: Vec<Vec<RsgbBlock>>,
    head: Param,
    head_norm: NormParams,
    out: Param,
    out_bias: Param,
}

/// Tape handles produced by one backbone pass.
#[derive(Clone, Debug)]
pub struct BackboneOutput {
    /// Per-level features at their native resolution.
    pub levels: Vec<Var>,
    /// Coarse depth, `(1, 1, depth_size, depth_size)` after the sigmoid.
    pub depth: Var,
}

impl Backbone {
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let stem = params.add_weight(
            "stem",
            Shape::new(config.stem_channels, config.input_channels, 3, 3),
            &mut rng,
        );
        let stem_norm = NormParams::new(&mut params, "stem_norm", config.stem_channels);
        let mut in_ch = config.stem_channels;
        let mut levels = Vec::with_capacity(config.levels.len());
        for (li, level) in config.levels.iter().enumerate() {
            let mut blocks = Vec::with_capacity(level.blocks);
            for bi in 0..level.blocks {
                blocks.push(RsgbBlock::new(
                    &mut params,
                    &format!("level{li}.rsgb{bi}"),
                    in_ch,
                    level.channels,
                    &mut rng,
                ));
                in_ch = level.channels;
            }
            levels.push(blocks);
        }
        let concat: usize = config.levels.iter().map(|l| l.channels).sum();
        let head = params.add_weight("head", Shape::new(config.head_channels, concat, 3, 3), &mut rng);
        let head_norm = NormParams::new(&mut params, "head_norm", config.head_channels);
        let out = params.add_weight("out", Shape::new(1, config.head_channels, 1, 1), &mut rng);
        let out_bias = params.add("out.bias", Tensor::zeros(Shape::new(1, 1, 1, 1)));
        Ok(Self {
            config,
            params,
            stem,
            stem_norm,
            levels,
            head,
            head_norm,
            out,
            out_bias,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn level_channels(&self) -> Vec<usize> {
        self.config.levels.iter().map(|l| l.channels).collect()
    }

    pub fn forward_on(&self, tape: &mut GradTape, bound: &Bound, frame: Var) -> Result<BackboneOutput> {
        let s = tape.value(frame).shape();
        let expect = Shape::new(1, self.config.input_channels, self.config.input_size, self.config.input_size);
        if s != expect {
            return Err(Error::ShapeMismatch {
                op: "backbone input",
                left: s,
                right: expect,
            });
        }
        let x = tape.conv2d(frame, bound.var(self.stem), None, 1, Padding::Same)?;
        let x = self.stem_norm.apply(tape, bound, x)?;
        let mut x = tape.relu(x);
        let mut level_out = Vec::with_capacity(self.levels.len());
        for (blocks, cfg) in self.levels.iter().zip(&self.config.levels) {
            for block in blocks {
                x = block.forward_on(tape, bound, x)?;
            }
            if cfg.pool {
                x = tape.max_pool2x2(x)?;
            }
            level_out.push(x);
        }
        let resized = level_out
            .iter()
            .map(|&v| pool_to(tape, v, self.config.depth_size))
            .collect::<Result<Vec<_>>>()?;
        let cat = tape.concat_channels(&resized)?;
        let h = tape.conv2d(cat, bound.var(self.head), None, 1, Padding::Same)?;
        let h = self.head_norm.apply(tape, bound, h)?;
        let h = tape.relu(h);
        let logit = tape.conv2d(h, bound.var(self.out), Some(bound.var(self.out_bias)), 1, Padding::Same)?;
        let depth = tape.sigmoid(logit);
        Ok(BackboneOutput {
            levels: level_out,
            depth,
        })
    }
}

/// Detached backbone outputs of one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameFeatures {
    pub levels: Vec<Tensor>,
    pub depth: Tensor,
}

impl Backbone {
    /// Evaluates the frame with the parameters held constant.
    pub fn features(&self, frame: &Tensor) -> Result<FrameFeatures> {
        let mut tape = GradTape::new();
        let bound = self.params.bind(&mut tape, false)?;
        let f = tape.constant(frame.clone())?;
        let out = self.forward_on(&mut tape, &bound, f)?;
        Ok(FrameFeatures {
            levels: out.levels.iter().map(|&v| tape.value(v).clone()).collect(),
            depth: tape.value(out.depth).clone(),
        })
    }
}

/// Coarse depth map of one `(1, 3, H, W)` frame.
pub fn backbone_forward(backbone: &Backbone, frame: &Tensor) -> Result<DepthMap> {
    DepthMap::from_tensor(&backbone.features(frame)?.depth)
}
