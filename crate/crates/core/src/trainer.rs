//! Adadelta, the two training stages, loss curves and checkpoints.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{Backbone, BackboneConfig, FrameFeatures};
use crate::depth::{DepthMap, Mask};
use crate::error::{invalid, Error, Result};
use crate::losses::{self, cdl_on, edl_on, CdlKernels, Reduction};
use crate::metrics::{fuse_score, sweep_thresholds, ScoreRecord};
use crate::params::ParamSet;
use crate::stpm::{Stpm, StpmConfig};
use crate::synth::SyntheticClip;
use crate::tape::{GradTape, Gradients};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdadeltaConfig {
    pub lr: f64,
    pub rho: f64,
    pub eps: f64,
}

impl Default for AdadeltaConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            rho: 0.95,
            eps: 1e-8,
        }
    }
}

/// Running averages of squared gradients and squared updates, one per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdadeltaState {
    pub sq_grad: Vec<Tensor>,
    pub sq_update: Vec<Tensor>,
}

impl AdadeltaState {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            sq_grad: zeros.clone(),
            sq_update: zeros,
        }
    }
}

/// One Adadelta update:
/// `E[g^2] <- rho E[g^2] + (1 - rho) g^2`,
/// `d = sqrt(E[d^2] + eps) / sqrt(E[g^2] + eps) * g`,
/// `E[d^2] <- rho E[d^2] + (1 - rho) d^2`, `p <- p - lr d`.
pub fn adadelta_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdadeltaState, cfg: &AdadeltaConfig) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.sq_grad.len() {
        return Err(invalid(format!(
            "adadelta got {} parameters, {} gradients and {} state slots",
            params.len(),
            grads.len(),
            state.sq_grad.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        p.expect_same_shape(g, "adadelta_step")?;
        p.expect_same_shape(&state.sq_grad[i], "adadelta_step state")?;
    }
    let (rho, eps) = (cfg.rho, cfg.eps);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let eg = state.sq_grad[i].data_mut();
        let ed = state.sq_update[i].data_mut();
        let pd = p.data_mut();
        for j in 0..pd.len() {
            let gj = g.data()[j];
            eg[j] = rho * eg[j] + (1.0 - rho) * gj * gj;
            let d = (ed[j] + eps).sqrt() / (eg[j] + eps).sqrt() * gj;
            ed[j] = rho * ed[j] + (1.0 - rho) * d * d;
            pd[j] -= cfg.lr * d;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: u8,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: AdadeltaConfig,
    /// Frames per clip.
    pub frames: usize,
    /// Raw frames between sampled frames.
    pub interval: usize,
    pub reduction: Reduction,
    /// Binary loss weight in the overall loss.
    pub beta: f64,
}

impl TrainConfig {
    /// Full-scale single-frame stage.
    pub fn stage1() -> Self {
        Self {
            stage: 1,
            steps: 0,
            batch_size: 48,
            seed: 0,
            optimizer: AdadeltaConfig::default(),
            frames: 5,
            interval: 3,
            reduction: Reduction::Sum,
            beta: 0.8,
        }
    }

    /// Full-scale multi-frame stage.
    pub fn stage2() -> Self {
        Self {
            stage: 2,
            batch_size: 2,
            optimizer: AdadeltaConfig {
                lr: 1e-2,
                ..AdadeltaConfig::default()
            },
            ..Self::stage1()
        }
    }

    /// Desk-scale single-frame stage.
    pub fn desk_stage1() -> Self {
        Self {
            steps: 300,
            batch_size: 4,
            optimizer: AdadeltaConfig {
                lr: 1.0,
                rho: 0.95,
                eps: 1e-6,
            },
            ..Self::stage1()
        }
    }

    /// Desk-scale multi-frame stage.
    pub fn desk_stage2() -> Self {
        Self {
            stage: 2,
            steps: 300,
            batch_size: 4,
            ..Self::desk_stage1()
        }
    }

    pub fn validate(&self, stage: u8) -> Result<()> {
        if self.stage != stage {
            return Err(Error::Config(format!("config is for stage {}, not stage {stage}", self.stage)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.frames < 2 {
            return Err(Error::Config("clips need at least 2 frames".into()));
        }
        if !(0.0..=1.0).contains(&self.beta) || !(0.0..1.0).contains(&self.optimizer.rho) {
            return Err(Error::Config("beta must lie in [0, 1] and rho in [0, 1)".into()));
        }
        if !(self.optimizer.lr >= 0.0 && self.optimizer.eps > 0.0) {
            return Err(Error::Config("learning rate must be nonnegative and eps positive".into()));
        }
        Ok(())
    }
}

/// Losses of one optimizer step, evaluated before the update.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossRecord {
    pub step: usize,
    pub l_edl: f64,
    pub l_cdl: f64,
    /// Absent in the single-frame stage.
    pub l_binary: Option<f64>,
    pub l_overall: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossCurve {
    pub records: Vec<LossRecord>,
}

impl LossCurve {
    pub fn write_csv(&self, writer: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for r in &self.records {
            w.serialize(r)?;
        }
        if self.records.is_empty() {
            w.write_record(["step", "l_edl", "l_cdl", "l_binary", "l_overall"])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn overall(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.l_overall).collect()
    }
}

/// One frame with its depth target.
#[derive(Clone, Debug)]
pub struct DepthSample {
    pub frame: Tensor,
    pub target: DepthMap,
}

/// Every frame of every clip as a single-frame sample.
pub fn frame_samples(clips: &[SyntheticClip]) -> Vec<DepthSample> {
    clips
        .iter()
        .flat_map(|c| {
            c.depth.iter().enumerate().map(move |(i, d)| DepthSample {
                frame: c.frame_tensor(i),
                target: d.clone(),
            })
        })
        .collect()
}

fn check_finite(loss: f64, step: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss { step })
    }
}

fn batch_indices(rng: &mut ChaCha8Rng, len: usize, batch: usize) -> Vec<usize> {
    if batch >= len {
        (0..len).collect()
    } else {
        sample(rng, len, batch).into_vec()
    }
}

fn accumulate(acc: &mut [Tensor], grads: Vec<Tensor>, scale: f64) {
    for (a, g) in acc.iter_mut().zip(grads) {
        for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
            *x += scale * y;
        }
    }
}

/// Optimizes `L_EDL + L_CDL` of the backbone's coarse maps.
pub fn train_stage1(cfg: &TrainConfig, backbone: &mut Backbone, samples: &[DepthSample]) -> Result<LossCurve> {
    cfg.validate(1)?;
    if samples.is_empty() {
        return Err(invalid("stage 1 needs at least one sample"));
    }
    let kernels = CdlKernels::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = AdadeltaState::new(backbone.params().values());
    let mut curve = LossCurve::default();
    for step in 0..cfg.steps {
        let batch = batch_indices(&mut rng, samples.len(), cfg.batch_size);
        let scale = 1.0 / batch.len() as f64;
        let mut grads: Vec<Tensor> = backbone.params().values().iter().map(|t| Tensor::zeros(t.shape())).collect();
        let (mut l_edl, mut l_cdl) = (0.0, 0.0);
        for &i in &batch {
            let s = &samples[i];
            let mut tape = GradTape::new();
            let bound = backbone.params().bind(&mut tape, true)?;
            let frame = tape.constant(s.frame.clone())?;
            let out = backbone.forward_on(&mut tape, &bound, frame)?;
            let gt = tape.constant(s.target.to_tensor())?;
            let e = edl_on(&mut tape, out.depth, gt, cfg.reduction)?;
            let c = cdl_on(&mut tape, &kernels, out.depth, gt, cfg.reduction)?;
            let loss = tape.add(e, c)?;
            l_edl += scale * tape.value(e).item()?;
            l_cdl += scale * tape.value(c).item()?;
            let g: Gradients = tape.backward(loss)?;
            accumulate(&mut grads, bound.grads(&g), scale);
        }
        let l_overall = l_edl + l_cdl;
        check_finite(l_overall, step)?;
        curve.records.push(LossRecord {
            step,
            l_edl,
            l_cdl,
            l_binary: None,
            l_overall,
        });
        adadelta_step(backbone.params_mut().values_mut(), &grads, &mut state, &cfg.optimizer)?;
    }
    Ok(curve)
}

/// A clip prepared for the multi-frame stage.
#[derive(Clone, Debug)]
pub struct TrainClip {
    pub features: Vec<FrameFeatures>,
    pub depth: Vec<DepthMap>,
    pub live: bool,
}

/// Runs the frozen backbone over every frame once.
pub fn prepare_clips(backbone: &Backbone, clips: &[SyntheticClip], frames: usize) -> Result<Vec<TrainClip>> {
    clips
        .iter()
        .map(|c| {
            if c.frames.len() < frames {
                return Err(invalid(format!("clip has {} frames, need {frames}", c.frames.len())));
            }
            Ok(TrainClip {
                features: (0..frames)
                    .map(|i| backbone.features(&c.frame_tensor(i)))
                    .collect::<Result<_>>()?,
                depth: c.depth[..frames].to_vec(),
                live: c.label.is_live(),
            })
        })
        .collect()
}

/// Optimizes the overall loss of the temporal module; the backbone is only read.
pub fn train_stage2(cfg: &TrainConfig, backbone: &Backbone, stpm: &mut Stpm, clips: &[SyntheticClip]) -> Result<LossCurve> {
    cfg.validate(2)?;
    if clips.is_empty() {
        return Err(invalid("stage 2 needs at least one clip"));
    }
    let prepared = prepare_clips(backbone, clips, cfg.frames)?;
    train_stage2_prepared(cfg, stpm, &prepared)
}

pub fn train_stage2_prepared(cfg: &TrainConfig, stpm: &mut Stpm, clips: &[TrainClip]) -> Result<LossCurve> {
    cfg.validate(2)?;
    if clips.is_empty() {
        return Err(invalid("stage 2 needs at least one clip"));
    }
    let kernels = CdlKernels::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = AdadeltaState::new(stpm.params().values());
    let mut curve = LossCurve::default();
    let beta = cfg.beta;
    for step in 0..cfg.steps {
        let batch = batch_indices(&mut rng, clips.len(), cfg.batch_size);
        let scale = 1.0 / batch.len() as f64;
        let mut grads: Vec<Tensor> = stpm.params().values().iter().map(|t| Tensor::zeros(t.shape())).collect();
        let (mut l_edl, mut l_cdl, mut l_bin, mut l_all) = (0.0, 0.0, 0.0, 0.0);
        for &i in &batch {
            let clip = &clips[i];
            let mut tape = GradTape::new();
            let bound = stpm.params().bind(&mut tape, true)?;
            let out = stpm.forward_on(&mut tape, &bound, &clip.features)?;
            let mut edls = Vec::with_capacity(out.refined.len());
            let mut cdls = Vec::with_capacity(out.refined.len());
            for (t, &r) in out.refined.iter().enumerate() {
                let gt = tape.constant(clip.depth[t].to_tensor())?;
                edls.push(edl_on(&mut tape, r, gt, cfg.reduction)?);
                cdls.push(cdl_on(&mut tape, &kernels, r, gt, cfg.reduction)?);
            }
            let e = tape.mean_of(&edls)?;
            let c = tape.mean_of(&cdls)?;
            let label = if clip.live { losses::LIVE_CLASS } else { losses::SPOOF_CLASS };
            let b = tape.softmax_cross_entropy(out.logits, &[label])?;
            let depth = tape.add(e, c)?;
            let wb = tape.affine(b, beta, 0.0);
            let wd = tape.affine(depth, 1.0 - beta, 0.0);
            let loss = tape.add(wb, wd)?;
            l_edl += scale * tape.value(e).item()?;
            l_cdl += scale * tape.value(c).item()?;
            l_bin += scale * tape.value(b).item()?;
            l_all += scale * tape.value(loss).item()?;
            let g = tape.backward(loss)?;
            accumulate(&mut grads, bound.grads(&g), scale);
        }
        check_finite(l_all, step)?;
        curve.records.push(LossRecord {
            step,
            l_edl,
            l_cdl,
            l_binary: Some(l_bin),
            l_overall: l_all,
        });
        adadelta_step(stpm.params_mut().values_mut(), &grads, &mut state, &cfg.optimizer)?;
    }
    Ok(curve)
}

/// Fused living score of every clip: refined maps masked by each transition's
/// leading-frame mask, combined with the binary head's live probability.
pub fn score_clips(backbone: &Backbone, stpm: &Stpm, clips: &[SyntheticClip], frames: usize, beta: f64) -> Result<Vec<ScoreRecord>> {
    clips
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let features = (0..frames)
                .map(|k| backbone.features(&c.frame_tensor(k)))
                .collect::<Result<Vec<_>>>()?;
            let p = stpm.predict(&features)?;
            let masks: Vec<Mask> = c.masks[..p.refined.len()].to_vec();
            let score = fuse_score(&p.refined, &masks, p.live_probability, beta)?;
            let id = format!("clip_{i:04}");
            match c.pai() {
                None => ScoreRecord::live(id, score),
                Some(pai) => ScoreRecord::attack(id, pai, score),
            }
        })
        .collect()
}

/// Picks the middle of the thresholds with the lowest ACER on `records`.
pub fn select_threshold(records: &[ScoreRecord]) -> Result<f64> {
    let sweep = sweep_thresholds(records)?;
    let best = sweep
        .points
        .iter()
        .map(|p| p.acer)
        .min()
        .ok_or_else(|| invalid("no thresholds to choose from"))?;
    let ties: Vec<f64> = sweep.points.iter().filter(|p| p.acer == best).map(|p| p.threshold).collect();
    Ok(ties[ties.len() / 2])
}

/// Network sizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelPreset {
    /// 32-pixel input, 16x16 maps.
    Tiny,
    /// 64-pixel input, 16x16 maps.
    Desk,
    /// 256-pixel input, 32x32 maps, full channel counts.
    Full,
}

impl ModelPreset {
    pub fn backbone(self) -> BackboneConfig {
        match self {
            ModelPreset::Tiny => BackboneConfig::tiny(),
            ModelPreset::Desk => BackboneConfig::desk(),
            ModelPreset::Full => BackboneConfig::default(),
        }
    }

    pub fn stpm(self) -> StpmConfig {
        match self {
            ModelPreset::Tiny | ModelPreset::Desk => StpmConfig::desk(),
            ModelPreset::Full => StpmConfig::default(),
        }
    }
}

/// What a checkpoint holds, enough to rebuild the network before loading values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelSpec {
    Backbone { backbone: BackboneConfig },
    Stpm { backbone: BackboneConfig, stpm: StpmConfig },
}

pub fn save_backbone(backbone: &Backbone, stem: impl AsRef<Path>) -> Result<String> {
    let spec = ModelSpec::Backbone {
        backbone: backbone.config().clone(),
    };
    save_checkpoint(backbone.params(), serde_json::to_value(spec)?, stem)
}

pub fn save_stpm(stpm: &Stpm, backbone: &BackboneConfig, stem: impl AsRef<Path>) -> Result<String> {
    let spec = ModelSpec::Stpm {
        backbone: backbone.clone(),
        stpm: stpm.config().clone(),
    };
    save_checkpoint(stpm.params(), serde_json::to_value(spec)?, stem)
}

pub fn load_backbone(stem: impl AsRef<Path>) -> Result<Backbone> {
    let (params, manifest) = load_checkpoint(stem)?;
    match serde_json::from_value(manifest.model)? {
        ModelSpec::Backbone { backbone } => {
            let mut b = Backbone::new(backbone, 0)?;
            b.params_mut().load_from(&params)?;
            Ok(b)
        }
        ModelSpec::Stpm { .. } => Err(Error::Format("checkpoint holds a temporal module, not a backbone".into())),
    }
}

pub fn load_stpm(stem: impl AsRef<Path>) -> Result<(Stpm, BackboneConfig)> {
    let (params, manifest) = load_checkpoint(stem)?;
    match serde_json::from_value(manifest.model)? {
        ModelSpec::Stpm { backbone, stpm } => {
            let shell = Backbone::new(backbone.clone(), 0)?;
            let mut s = Stpm::new(stpm, &shell.level_channels(), backbone.depth_size, 0)?;
            s.params_mut().load_from(&params)?;
            Ok((s, backbone))
        }
        ModelSpec::Backbone { .. } => Err(Error::Format("checkpoint holds a backbone, not a temporal module".into())),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 4],
    /// Index of the first value in the flat buffer.
    pub offset: usize,
}

/// Describes a flat little-endian `f64` parameter file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub tensors: Vec<TensorEntry>,
    /// SHA-256 of the binary file, hex encoded.
    pub sha256: String,
    /// Free-form model description, e.g. the configuration used to build it.
    pub model: serde_json::Value,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Paths `<stem>.bin` and `<stem>.json`.
pub fn checkpoint_paths(stem: impl AsRef<Path>) -> (PathBuf, PathBuf) {
    let stem = stem.as_ref();
    (stem.with_extension("bin"), stem.with_extension("json"))
}

pub fn encode_params(params: &ParamSet) -> (Vec<u8>, Vec<TensorEntry>) {
    let mut bytes = Vec::with_capacity(8 * params.numel());
    let mut entries = Vec::with_capacity(params.len());
    let mut offset = 0;
    for (name, t) in params.iter() {
        entries.push(TensorEntry {
            name: name.to_owned(),
            shape: t.shape().0,
            offset,
        });
        offset += t.numel();
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    (bytes, entries)
}

/// Writes the parameters and their manifest. Returns the hex SHA-256 of the binary.
pub fn save_checkpoint(params: &ParamSet, model: serde_json::Value, stem: impl AsRef<Path>) -> Result<String> {
    let (bin, json) = checkpoint_paths(stem);
    let (bytes, tensors) = encode_params(params);
    let sha256 = hex(&Sha256::digest(&bytes));
    fs::write(&bin, &bytes)?;
    let manifest = CheckpointManifest {
        tensors,
        sha256: sha256.clone(),
        model,
    };
    fs::write(&json, serde_json::to_string_pretty(&manifest)?)?;
    Ok(sha256)
}

/// Reads parameters back, verifying the hash and the layout.
pub fn load_checkpoint(stem: impl AsRef<Path>) -> Result<(ParamSet, CheckpointManifest)> {
    let (bin, json) = checkpoint_paths(stem);
    let manifest: CheckpointManifest = serde_json::from_str(&fs::read_to_string(&json)?)?;
    let bytes = fs::read(&bin)?;
    let digest = hex(&Sha256::digest(&bytes));
    if digest != manifest.sha256 {
        return Err(Error::Format(format!(
            "checkpoint {} hash {digest} does not match manifest {}",
            bin.display(),
            manifest.sha256
        )));
    }
    if bytes.len() % 8 != 0 {
        return Err(Error::Format("checkpoint length is not a multiple of 8 bytes".into()));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let mut params = ParamSet::new();
    for e in &manifest.tensors {
        let shape = Shape(e.shape);
        let end = e.offset + shape.numel();
        let data = values
            .get(e.offset..end)
            .ok_or_else(|| Error::Format(format!("tensor {} runs past the end of the checkpoint", e.name)))?;
        params.add(e.name.clone(), Tensor::new(shape, data.to_vec())?);
    }
    Ok((params, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::synth::{make_live_clip, SynthConfig};

    #[test]
    fn zero_gradient_decays_state() {
        let mut p = vec![Tensor::full(Shape::new(1, 1, 1, 2), 1.0)];
        let mut st = AdadeltaState::new(&p);
        st.sq_grad[0].data_mut().fill(4.0);
        st.sq_update[0].data_mut().fill(2.0);
        let cfg = AdadeltaConfig::default();
        adadelta_step(&mut p, &[Tensor::zeros(Shape::new(1, 1, 1, 2))], &mut st, &cfg).unwrap();
        assert_eq!(p[0].data(), &[1.0, 1.0]);
        assert_eq!(st.sq_grad[0].data(), &[0.95 * 4.0; 2]);
        assert_eq!(st.sq_update[0].data(), &[0.95 * 2.0; 2]);
        assert!(adadelta_step(&mut p, &[Tensor::zeros(Shape::new(1, 1, 1, 3))], &mut st, &cfg).is_err());
    }

    #[test]
    fn zero_step_budget_keeps_parameters() {
        let mut bb = Backbone::new(BackboneConfig::tiny(), 1).unwrap();
        let before = bb.params().digest();
        let cfg = TrainConfig {
            steps: 0,
            ..TrainConfig::desk_stage1()
        };
        let clip = make_live_clip(
            1,
            &SynthConfig {
                size: 32,
                sigma: (4.0, 5.0),
                motion: (0.03, 0.05),
                ..SynthConfig::default()
            },
        )
        .unwrap();
        let curve = train_stage1(&cfg, &mut bb, &frame_samples(&[clip])).unwrap();
        assert!(curve.records.is_empty());
        assert_eq!(bb.params().digest(), before);
        assert!(train_stage1(&cfg, &mut bb, &[]).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let bb = Backbone::new(BackboneConfig::tiny(), 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("ckpt");
        let h = save_checkpoint(bb.params(), serde_json::json!({"kind": "backbone"}), &stem).unwrap();
        let (ps, m) = load_checkpoint(&stem).unwrap();
        assert_eq!(&ps, bb.params());
        assert_eq!(m.sha256, h);
        let (bin, _) = checkpoint_paths(&stem);
        let mut bytes = fs::read(&bin).unwrap();
        bytes[3] ^= 1;
        fs::write(&bin, bytes).unwrap();
        assert!(load_checkpoint(&stem).is_err());
    }

    #[test]
    fn csv_header() {
        let curve = LossCurve {
            records: vec![LossRecord {
                step: 0,
                l_edl: 1.0,
                l_cdl: 2.0,
                l_binary: None,
                l_overall: 3.0,
            }],
        };
        let mut buf = Vec::new();
        curve.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "step,l_edl,l_cdl,l_binary,l_overall\n0,1.0,2.0,,3.0\n");
    }
}
