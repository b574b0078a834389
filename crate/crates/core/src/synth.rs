//! Synthetic clips: a textured Gaussian "hill" seen either as a live surface with
//! depth-dependent parallax, as a rigidly moving print, or as a replayed recording on
//! a moving screen.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::depth::{DepthMap, Mask};
use crate::error::{invalid, Error, Result};
use crate::geometry;
use crate::pgm::GrayImage;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpoofMode {
    Print,
    Replay,
}

impl SpoofMode {
    pub fn tag(&self) -> &'static str {
        match self {
            SpoofMode::Print => "print",
            SpoofMode::Replay => "replay",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "pai")]
pub enum ClipLabel {
    Live,
    Spoof(SpoofMode),
}

impl ClipLabel {
    pub fn is_live(&self) -> bool {
        matches!(self, ClipLabel::Live)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Square frame side in pixels.
    pub size: usize,
    pub depth_size: usize,
    pub frames: usize,
    /// Raw frames between consecutive sampled frames.
    pub interval: usize,
    /// Focal length in pixels.
    pub focal: f64,
    /// Distance to the hill apex.
    pub distance: f64,
    /// Extra distance of the flat surroundings behind the apex.
    pub relief: f64,
    /// Range of vertical facial motion per raw frame, in scene units.
    pub motion: (f64, f64),
    /// Range of rigid carrier motion per raw frame, in pixels.
    pub carrier_motion: (f64, f64),
    /// Hill width as a range of Gaussian sigmas in pixels.
    pub sigma: (f64, f64),
    pub texture_amplitude: f64,
    pub texture_period: f64,
    pub noise: f64,
    pub mask_threshold: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            size: 64,
            depth_size: 16,
            frames: 5,
            interval: 3,
            focal: 64.0,
            distance: 10.0,
            relief: 10.0,
            motion: (0.09, 0.15),
            carrier_motion: (0.3, 0.95),
            sigma: (9.0, 11.0),
            texture_amplitude: 0.08,
            texture_period: 9.0,
            noise: 0.02,
            mask_threshold: 0.05,
        }
    }
}

impl SynthConfig {
    /// 32-pixel frames with a smaller, slower hill; pairs with the tiny backbone.
    pub fn tiny() -> Self {
        Self {
            size: 32,
            depth_size: 16,
            sigma: (4.0, 5.0),
            motion: (0.03, 0.05),
            carrier_motion: (0.1, 0.3),
            texture_period: 5.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_owned()));
        if self.size == 0 || self.depth_size == 0 || !self.size.is_multiple_of(self.depth_size) {
            return bad("frame size must be a positive multiple of the depth size");
        }
        if self.frames < 2 || self.interval == 0 {
            return bad("need at least 2 frames and a positive interval");
        }
        if self.focal <= 0.0 || self.distance <= 0.0 || self.relief < 0.0 {
            return bad("focal length and distance must be positive, relief nonnegative");
        }
        for (lo, hi) in [self.motion, self.carrier_motion, self.sigma] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return bad("ranges must be finite with lo <= hi");
            }
        }
        if self.sigma.0 <= 0.0 || self.noise < 0.0 || self.texture_period <= 0.0 {
            return bad("sigma and texture period must be positive, noise nonnegative");
        }
        Ok(())
    }
}

/// Per-clip generator parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipParams {
    pub center_row: f64,
    pub center_col: f64,
    pub sigma: f64,
    pub phase: f64,
    /// Facial motion per raw frame (zero for prints).
    pub dx: f64,
    /// Carrier motion per raw frame in pixels (zero for live clips).
    pub dv: f64,
    /// Image shift of the apex per sampled frame.
    pub apex_shift: f64,
    /// Image shift of the flat surroundings per sampled frame.
    pub background_shift: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticClip {
    pub label: ClipLabel,
    pub seed: u64,
    pub params: ClipParams,
    pub frames: Vec<GrayImage>,
    pub depth: Vec<DepthMap>,
    pub masks: Vec<Mask>,
}

struct Hill {
    row: f64,
    col: f64,
    sigma: f64,
}

impl Hill {
    fn height(&self, r: f64, c: f64) -> f64 {
        let (dr, dc) = (r - self.row, c - self.col);
        (-(dr * dr + dc * dc) / (2.0 * self.sigma * self.sigma)).exp()
    }
}

struct Texture {
    amplitude: f64,
    period: f64,
    phase: f64,
}

impl Texture {
    fn intensity(&self, hill: &Hill, r: f64, c: f64) -> f64 {
        let w = std::f64::consts::TAU / self.period;
        0.2 + 0.6 * hill.height(r, c) + self.amplitude * (w * r + self.phase).sin() * (w * 0.7 * c).cos()
    }
}

/// Solves `q + shift(q) = y` for the source row `q` by fixed-point iteration.
fn source_row(y: f64, col: f64, shift: impl Fn(f64, f64) -> f64) -> f64 {
    let mut q = y;
    for _ in 0..200 {
        let next = y - shift(q, col);
        if (next - q).abs() < 1e-13 {
            return next;
        }
        q = next;
    }
    q
}

fn quantize(v: f64) -> u8 {
    (255.0 * v.clamp(0.0, 1.0)).round() as u8
}

fn normalized_blocks(values: &[f64], size: usize, depth_size: usize) -> Vec<f64> {
    let b = size / depth_size;
    let mut out = vec![0.0; depth_size * depth_size];
    for r in 0..size {
        for c in 0..size {
            out[(r / b) * depth_size + c / b] += values[r * size + c];
        }
    }
    let area = (b * b) as f64;
    out.iter_mut().for_each(|v| *v /= area);
    let lo = out.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    out.iter().map(|v| if hi > lo { (v - lo) / (hi - lo) } else { 0.0 }).collect()
}

fn make_clip(seed: u64, cfg: &SynthConfig, label: ClipLabel) -> Result<SyntheticClip> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = cfg.size as f64;
    let sigma = rng.random_range(cfg.sigma.0..=cfg.sigma.1);
    let hill = Hill {
        row: size * 0.375 + rng.random_range(-2.0..=2.0),
        col: size * 0.5 + rng.random_range(-3.0..=3.0),
        sigma,
    };
    let texture = Texture {
        amplitude: cfg.texture_amplitude,
        period: cfg.texture_period,
        phase: rng.random_range(0.0..std::f64::consts::TAU),
    };
    let raw_dx = rng.random_range(cfg.motion.0..=cfg.motion.1);
    let raw_dv = rng.random_range(cfg.carrier_motion.0..=cfg.carrier_motion.1);
    let (dx, dv) = match label {
        ClipLabel::Live => (raw_dx, 0.0),
        ClipLabel::Spoof(SpoofMode::Print) => (0.0, raw_dv),
        ClipLabel::Spoof(SpoofMode::Replay) => (raw_dx, raw_dv),
    };
    let step = cfg.interval as f64;
    // Parallax per sampled frame of a surface point with source coordinates (q, col).
    let parallax = |q: f64, col: f64| -> f64 {
        let depth = cfg.distance + cfg.relief * (1.0 - hill.height(q, col));
        geometry::project(step * dx, depth, cfg.focal).expect("positive depth")
    };
    let apex_shift = parallax(hill.row, hill.col);
    let background_shift = geometry::project(step * dx, cfg.distance + cfg.relief, cfg.focal)?;

    let total = (cfg.frames - 1) as f64 * (apex_shift + step * dv);
    let reach = sigma;
    if hill.row - reach < 0.0 || hill.row + total + reach > size - 1.0 || hill.col - reach < 0.0 || hill.col + reach > size - 1.0 {
        return Err(invalid(format!(
            "hill of sigma {sigma:.2} moving {total:.2} px leaves the {}-pixel frame",
            cfg.size
        )));
    }

    let normal = Normal::new(0.0, cfg.noise.max(f64::MIN_POSITIVE)).map_err(|e| invalid(e.to_string()))?;
    let n = cfg.size;
    let mut frames = Vec::with_capacity(cfg.frames);
    let mut depth = Vec::with_capacity(cfg.frames);
    let mut masks = Vec::with_capacity(cfg.frames);
    for k in 0..cfg.frames {
        let kf = k as f64;
        let carrier = kf * step * dv;
        let mut pixels = Vec::with_capacity(n * n);
        let mut heights = Vec::with_capacity(n * n);
        for r in 0..n {
            for c in 0..n {
                let (y, col) = (r as f64, c as f64);
                let q = if dx == 0.0 {
                    y - carrier
                } else {
                    source_row(y - carrier, col, |q, col| kf * parallax(q, col))
                };
                let mut v = texture.intensity(&hill, q, col);
                if cfg.noise > 0.0 {
                    v += normal.sample(&mut rng);
                }
                pixels.push(quantize(v));
                heights.push(hill.height(q, col));
            }
        }
        frames.push(GrayImage::new(n, n, pixels)?);
        let target = normalized_blocks(&heights, n, cfg.depth_size);
        masks.push(Mask::new(
            cfg.depth_size,
            target.iter().map(|&v| v > cfg.mask_threshold).collect(),
        )?);
        depth.push(if label.is_live() {
            DepthMap::new(cfg.depth_size, target)?
        } else {
            DepthMap::filled(cfg.depth_size, 0.0)?
        });
    }
    Ok(SyntheticClip {
        label,
        seed,
        params: ClipParams {
            center_row: hill.row,
            center_col: hill.col,
            sigma,
            phase: texture.phase,
            dx,
            dv,
            apex_shift,
            background_shift,
        },
        frames,
        depth,
        masks,
    })
}

pub fn make_live_clip(seed: u64, cfg: &SynthConfig) -> Result<SyntheticClip> {
    make_clip(seed, cfg, ClipLabel::Live)
}

pub fn make_spoof_clip(seed: u64, cfg: &SynthConfig, mode: SpoofMode) -> Result<SyntheticClip> {
    make_clip(seed, cfg, ClipLabel::Spoof(mode))
}

impl SyntheticClip {
    /// Frame `i` as a `(1, 3, H, W)` tensor in `[0, 1]`, gray replicated over channels.
    pub fn frame_tensor(&self, i: usize) -> Tensor {
        let img = &self.frames[i];
        let plane: Vec<f64> = img.pixels().iter().map(|&p| f64::from(p) / 255.0).collect();
        let mut data = Vec::with_capacity(3 * plane.len());
        for _ in 0..3 {
            data.extend_from_slice(&plane);
        }
        Tensor::new(Shape::new(1, 3, img.height(), img.width()), data).expect("frame buffer")
    }

    pub fn frame_tensors(&self) -> Vec<Tensor> {
        (0..self.frames.len()).map(|i| self.frame_tensor(i)).collect()
    }

    pub fn pai(&self) -> Option<&'static str> {
        match self.label {
            ClipLabel::Live => None,
            ClipLabel::Spoof(m) => Some(m.tag()),
        }
    }

    /// Writes `frame_<i>.pgm` files and `meta.json` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        for (i, f) in self.frames.iter().enumerate() {
            f.write(dir.join(format!("frame_{i}.pgm")))?;
        }
        let meta = ClipMeta {
            label: self.label,
            seed: self.seed,
            params: self.params.clone(),
            frames: self.frames.len(),
            depth_size: self.depth.first().map_or(0, DepthMap::size),
            depth: self.depth.iter().map(|d| d.data().to_vec()).collect(),
            masks: self.masks.iter().map(|m| m.cells().to_vec()).collect(),
        };
        fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta: ClipMeta = serde_json::from_str(&fs::read_to_string(dir.join("meta.json"))?)?;
        let frames = (0..meta.frames)
            .map(|i| GrayImage::read(dir.join(format!("frame_{i}.pgm"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            label: meta.label,
            seed: meta.seed,
            params: meta.params,
            frames,
            depth: meta
                .depth
                .into_iter()
                .map(|d| DepthMap::new(meta.depth_size, d))
                .collect::<Result<_>>()?,
            masks: meta
                .masks
                .into_iter()
                .map(|m| Mask::new(meta.depth_size, m))
                .collect::<Result<_>>()?,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct ClipMeta {
    label: ClipLabel,
    seed: u64,
    params: ClipParams,
    frames: usize,
    depth_size: usize,
    depth: Vec<Vec<f64>>,
    masks: Vec<Vec<bool>>,
}

/// Balanced live/spoof clips; spoof instruments cycle through `pais`.
pub fn make_dataset(cfg: &SynthConfig, clips: usize, seed: u64, pais: &[SpoofMode]) -> Result<Vec<SyntheticClip>> {
    if pais.is_empty() {
        return Err(invalid("need at least one spoof instrument"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(clips);
    for i in 0..clips {
        let clip_seed = rng.random::<u64>();
        let clip = if i % 2 == 0 {
            make_live_clip(clip_seed, cfg)?
        } else {
            make_spoof_clip(clip_seed, cfg, pais[(i / 2) % pais.len()])?
        };
        out.push(clip);
    }
    out.shuffle(&mut rng);
    Ok(out)
}

pub fn save_dataset(clips: &[SyntheticClip], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    for (i, c) in clips.iter().enumerate() {
        c.save(dir.join(format!("clip_{i:04}")))?;
    }
    Ok(())
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Vec<SyntheticClip>> {
    let mut dirs: Vec<_> = fs::read_dir(dir.as_ref())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("meta.json").is_file())
        .collect();
    dirs.sort();
    dirs.iter().map(SyntheticClip::load).collect()
}

/// Vertical displacement of a block between two frames by exhaustive integer search
/// followed by a parabolic sub-pixel fit of the matching cost.
fn block_shift(a: &GrayImage, b: &GrayImage, top: usize, left: usize, (bh, bw): (usize, usize), max_shift: isize) -> Option<f64> {
    let n = a.height() as isize;
    let w = a.width();
    let cost = |s: isize| -> Option<f64> {
        let mut acc = 0.0;
        for r in 0..bh {
            let rb = (top + r) as isize + s;
            if rb < 0 || rb >= n {
                return None;
            }
            for c in 0..bw {
                let pa = f64::from(a.pixels()[(top + r) * w + left + c]);
                let pb = f64::from(b.pixels()[rb as usize * w + left + c]);
                acc += (pa - pb) * (pa - pb);
            }
        }
        Some(acc)
    };
    let costs: Vec<(isize, f64)> = (-max_shift..=max_shift).filter_map(|s| cost(s).map(|c| (s, c))).collect();
    let (best, _) = *costs.iter().min_by(|x, y| x.1.total_cmp(&y.1))?;
    let at = |s: isize| costs.iter().find(|c| c.0 == s).map(|c| c.1);
    let refined = match (at(best - 1), at(best), at(best + 1)) {
        (Some(l), Some(m), Some(r)) if l + r - 2.0 * m > 0.0 => best as f64 + 0.5 * (l - r) / (l + r - 2.0 * m),
        _ => best as f64,
    };
    Some(refined)
}

/// Mean over frame pairs of the spatial variance of local vertical displacements.
/// Rigid motion scores near zero; parallax from a relief scores clearly above it.
pub fn motion_variance(clip: &SyntheticClip) -> f64 {
    let (bh, bw) = (8, 16);
    let img = &clip.frames[0];
    let n = img.height();
    let mut total = 0.0;
    for pair in clip.frames.windows(2) {
        let mut shifts = Vec::new();
        let mut top = bh;
        while top + 2 * bh <= n {
            let mut left = 0;
            while left + bw <= img.width() {
                if let Some(s) = block_shift(&pair[0], &pair[1], top, left, (bh, bw), 4) {
                    shifts.push(s);
                }
                left += bw;
            }
            top += bh;
        }
        let m = shifts.iter().sum::<f64>() / shifts.len() as f64;
        total += shifts.iter().map(|s| (s - m) * (s - m)).sum::<f64>() / shifts.len() as f64;
    }
    total / (clip.frames.len() - 1) as f64
}

/// Checks that every live clip's motion variance exceeds every spoof clip's by at
/// least `margin`. Returns the lowest live and highest spoof statistic.
pub fn verify_separable(clips: &[SyntheticClip], margin: f64) -> Result<(f64, f64)> {
    let mut live_min = f64::INFINITY;
    let mut spoof_max = f64::NEG_INFINITY;
    for c in clips {
        let v = motion_variance(c);
        if c.label.is_live() {
            live_min = live_min.min(v);
        } else {
            spoof_max = spoof_max.max(v);
        }
    }
    if !(live_min - spoof_max >= margin) {
        return Err(invalid(format!(
            "synthetic task is not separable: live minimum {live_min:.4}, spoof maximum {spoof_max:.4}, margin {margin}"
        )));
    }
    Ok((live_min, spoof_max))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn live_targets_are_normalized() {
        let c = make_live_clip(3, &SynthConfig::default()).unwrap();
        assert_eq!(c.frames.len(), 5);
        for d in &c.depth {
            let max = d.data().iter().copied().fold(f64::MIN, f64::max);
            let min = d.data().iter().copied().fold(f64::MAX, f64::min);
            assert_eq!((min, max), (0.0, 1.0));
        }
        for (d, m) in c.depth.iter().zip(&c.masks) {
            for (v, &inside) in d.data().iter().zip(m.cells()) {
                assert_eq!(inside, *v > 0.05);
            }
        }
    }

    #[test]
    fn spoof_targets_are_zero() {
        for mode in [SpoofMode::Print, SpoofMode::Replay] {
            let c = make_spoof_clip(4, &SynthConfig::default(), mode).unwrap();
            assert!(c.depth.iter().all(|d| d.data().iter().all(|&v| v == 0.0)));
            assert!(c.masks.iter().all(|m| m.area() > 0));
        }
    }

    #[test]
    fn same_seed_same_clip() {
        let cfg = SynthConfig::default();
        assert_eq!(make_live_clip(9, &cfg).unwrap(), make_live_clip(9, &cfg).unwrap());
        assert_ne!(make_live_clip(9, &cfg).unwrap().frames, make_live_clip(10, &cfg).unwrap().frames);
    }

    #[test]
    fn out_of_frame_hill_is_rejected() {
        let cfg = SynthConfig {
            sigma: (30.0, 30.0),
            ..SynthConfig::default()
        };
        assert!(make_live_clip(1, &cfg).is_err());
    }

    #[test]
    fn print_moves_rigidly() {
        let cfg = SynthConfig {
            noise: 0.0,
            carrier_motion: (2.0 / 3.0, 2.0 / 3.0),
            ..SynthConfig::default()
        };
        let c = make_spoof_clip(5, &cfg, SpoofMode::Print).unwrap();
        let n = cfg.size;
        let (a, b) = (c.frames[0].pixels(), c.frames[1].pixels());
        // A 2-pixel rigid shift: every row reappears two rows lower.
        for r in 0..n - 2 {
            assert_eq!(&a[r * n..(r + 1) * n], &b[(r + 2) * n..(r + 3) * n]);
        }
    }

    #[test]
    fn disk_round_trip() {
        let c = make_live_clip(11, &SynthConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        c.save(dir.path()).unwrap();
        assert_eq!(SyntheticClip::load(dir.path()).unwrap(), c);
    }
}
