use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use depthpad::backbone::Backbone as CoreBackbone;
use depthpad::checks::{run_suite, CheckOptions, Suite};
use depthpad::depth::DepthMap;
use depthpad::geometry::{self, SceneSpec};
use depthpad::metrics::{self, percent, Label, MetricsReport, ScoreRecord};
use depthpad::stpm::{self, Stpm as CoreStpm};
use depthpad::synth::{self, ClipLabel, SpoofMode, SynthConfig, SyntheticClip};
use depthpad::trainer::{self, ModelPreset, TrainConfig};
use depthpad::{losses, Error};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(io) => PyOSError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for depthpad::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

fn preset(name: &str) -> PyResult<ModelPreset> {
    match name {
        "tiny" => Ok(ModelPreset::Tiny),
        "desk" => Ok(ModelPreset::Desk),
        "full" => Ok(ModelPreset::Full),
        other => Err(PyValueError::new_err(format!("unknown preset {other:?}; use tiny, desk or full"))),
    }
}

fn spoof_mode(name: &str) -> PyResult<SpoofMode> {
    match name {
        "print" => Ok(SpoofMode::Print),
        "replay" => Ok(SpoofMode::Replay),
        other => Err(PyValueError::new_err(format!("unknown attack {other:?}; use print or replay"))),
    }
}

fn depth_map(rows: Vec<Vec<f64>>) -> PyResult<DepthMap> {
    let size = rows.len();
    if rows.iter().any(|r| r.len() != size) {
        return Err(PyValueError::new_err("depth maps must be square lists of rows"));
    }
    DepthMap::new(size, rows.into_iter().flatten().collect()).py()
}

fn rows<T: Copy>(data: &[T], width: usize) -> Vec<Vec<T>> {
    data.chunks(width).map(<[T]>::to_vec).collect()
}

/// A three-point scene for the geometric depth analysis.
#[pyclass(module = "depthpad_py")]
struct Scene {
    inner: SceneSpec,
}

#[pymethods]
impl Scene {
    #[staticmethod]
    #[pyo3(signature = (f, z, d1, d2, dx, steps = 4))]
    fn live(f: f64, z: f64, d1: f64, d2: f64, dx: f64, steps: usize) -> Self {
        Self {
            inner: SceneSpec::live(f, z, d1, d2, dx, steps),
        }
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: SceneSpec::from_toml_str(text).py()?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: SceneSpec::load(path).py()?,
        })
    }

    #[getter]
    fn mode(&self) -> String {
        self.inner.mode.to_string()
    }

    /// Closed-form `(du_l, du_m, du_r)` for every step.
    fn observe(&self) -> PyResult<Vec<(f64, f64, f64)>> {
        let obs = geometry::observe(&self.inner).py()?;
        Ok(obs.steps.iter().map(|d| (d[0], d[1], d[2])).collect())
    }

    /// The same displacements from explicitly projected positions.
    fn simulate(&self) -> PyResult<Vec<(f64, f64, f64)>> {
        let obs = geometry::simulate_positions(&self.inner).py()?;
        Ok(obs.steps.iter().map(|d| (d[0], d[1], d[2])).collect())
    }

    /// Per-step rows as dicts and the scene verdict.
    fn sweep<'py>(&self, py: Python<'py>) -> PyResult<(Vec<Bound<'py, PyDict>>, String)> {
        let (rows, verdict) = geometry::sweep(&self.inner).py()?;
        let dicts = rows
            .iter()
            .map(|r| {
                let d = PyDict::new(py);
                d.set_item("step", r.step)?;
                d.set_item("du_l", r.du_l)?;
                d.set_item("du_m", r.du_m)?;
                d.set_item("du_r", r.du_r)?;
                d.set_item("ratio_estimate", r.ratio_estimate)?;
                d.set_item("flag", r.flag)?;
                Ok(d)
            })
            .collect::<PyResult<Vec<_>>>()?;
        Ok((dicts, verdict.to_string()))
    }

    fn __repr__(&self) -> String {
        format!("Scene(mode={}, steps={})", self.inner.mode, self.inner.steps)
    }
}

/// `(flag, value)` for one step's displacements; value is NaN when undefined.
#[pyfunction]
fn estimate_step(du_l: f64, du_m: f64, du_r: f64) -> (String, f64) {
    let e = geometry::estimate_step([du_l, du_m, du_r]);
    (e.flag().to_string(), e.value())
}

#[pyfunction]
fn edl(pred: Vec<Vec<f64>>, gt: Vec<Vec<f64>>) -> PyResult<f64> {
    losses::edl(&depth_map(pred)?, &depth_map(gt)?).py()
}

#[pyfunction]
fn cdl(pred: Vec<Vec<f64>>, gt: Vec<Vec<f64>>) -> PyResult<f64> {
    losses::cdl(&depth_map(pred)?, &depth_map(gt)?).py()
}

#[pyfunction]
fn overall_loss(binary: f64, edl: f64, cdl: f64, beta: f64) -> f64 {
    losses::overall_loss(binary, edl, cdl, beta)
}

#[pyfunction]
fn refine_depth(single: Vec<Vec<f64>>, multi: Vec<Vec<f64>>, alpha: f64) -> PyResult<Vec<Vec<f64>>> {
    let out = stpm::refine_depth(&depth_map(single)?, &depth_map(multi)?, alpha).py()?;
    Ok(rows(out.data(), out.size()))
}

type RecordTuple = (String, String, Option<String>, f64);

fn parse_records(items: Vec<RecordTuple>) -> PyResult<Vec<ScoreRecord>> {
    items
        .into_iter()
        .map(|(id, label, pai, score)| match (label.as_str(), pai) {
            ("live", _) => ScoreRecord::live(id, score).py(),
            ("attack", Some(pai)) => ScoreRecord::attack(id, pai, score).py(),
            ("attack", None) => Err(PyValueError::new_err(format!("attack record {id} needs an instrument"))),
            (other, _) => Err(PyValueError::new_err(format!("label must be live or attack, got {other:?}"))),
        })
        .collect()
}

fn record_tuple(r: &ScoreRecord) -> RecordTuple {
    match &r.label {
        Label::Live => (r.sample_id.clone(), "live".into(), None, r.score),
        Label::Attack(pai) => (r.sample_id.clone(), "attack".into(), Some(pai.clone()), r.score),
    }
}

fn report_dict<'py>(py: Python<'py>, r: &MetricsReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("threshold", r.threshold)?;
    d.set_item("apcer", percent(r.apcer))?;
    d.set_item("bpcer", percent(r.bpcer))?;
    d.set_item("acer", percent(r.acer))?;
    d.set_item("frr", percent(r.frr))?;
    d.set_item("far", percent(r.far))?;
    d.set_item("hter", percent(r.hter))?;
    let per = PyDict::new(py);
    for (pai, v) in &r.apcer_per_pai {
        per.set_item(pai, percent(*v))?;
    }
    d.set_item("apcer_per_pai", per)?;
    Ok(d)
}

/// Rates in percent at `threshold`; records are `(id, "live" | "attack", pai, score)`.
#[pyfunction]
fn compute_metrics<'py>(py: Python<'py>, records: Vec<RecordTuple>, threshold: f64) -> PyResult<Bound<'py, PyDict>> {
    let report = metrics::compute_metrics(&parse_records(records)?, threshold).py()?;
    report_dict(py, &report)
}

/// Every midpoint threshold and the index of the equal-error point.
#[pyfunction]
fn sweep_thresholds<'py>(py: Python<'py>, records: Vec<RecordTuple>) -> PyResult<(Vec<Bound<'py, PyDict>>, usize)> {
    let sweep = metrics::sweep_thresholds(&parse_records(records)?).py()?;
    let points = sweep.points.iter().map(|p| report_dict(py, p)).collect::<PyResult<Vec<_>>>()?;
    Ok((points, sweep.eer_index))
}

#[pyfunction]
fn select_threshold(records: Vec<RecordTuple>) -> PyResult<f64> {
    trainer::select_threshold(&parse_records(records)?).py()
}

/// One synthetic clip: gray frames, depth targets and face masks.
#[pyclass(module = "depthpad_py", frozen, from_py_object)]
#[derive(Clone)]
struct Clip {
    inner: SyntheticClip,
}

#[pymethods]
impl Clip {
    #[getter]
    fn label(&self) -> &'static str {
        match self.inner.label {
            ClipLabel::Live => "live",
            ClipLabel::Spoof(m) => m.tag(),
        }
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn frames(&self) -> Vec<Vec<Vec<u8>>> {
        self.inner.frames.iter().map(|f| rows(f.pixels(), f.width())).collect()
    }

    #[getter]
    fn depth(&self) -> Vec<Vec<Vec<f64>>> {
        self.inner.depth.iter().map(|d| rows(d.data(), d.size())).collect()
    }

    #[getter]
    fn masks(&self) -> Vec<Vec<Vec<bool>>> {
        self.inner.masks.iter().map(|m| rows(m.cells(), m.size())).collect()
    }

    /// Apex and background displacement per sampled frame.
    #[getter]
    fn shifts(&self) -> (f64, f64) {
        (self.inner.params.apex_shift, self.inner.params.background_shift)
    }

    fn motion_variance(&self) -> f64 {
        synth::motion_variance(&self.inner)
    }

    fn __repr__(&self) -> String {
        format!("Clip(label={}, seed={}, frames={})", self.label(), self.inner.seed, self.inner.frames.len())
    }
}

fn synth_config(preset_name: &str) -> PyResult<SynthConfig> {
    Ok(match preset(preset_name)? {
        ModelPreset::Tiny => SynthConfig::tiny(),
        _ => SynthConfig::default(),
    })
}

#[pyfunction]
#[pyo3(signature = (seed, kind = "live", preset = "desk"))]
fn make_clip(seed: u64, kind: &str, preset: &str) -> PyResult<Clip> {
    let cfg = synth_config(preset)?;
    let inner = match kind {
        "live" => synth::make_live_clip(seed, &cfg),
        other => synth::make_spoof_clip(seed, &cfg, spoof_mode(other)?),
    }
    .py()?;
    Ok(Clip { inner })
}

/// Alternating live and attack clips, attacks cycling through `pais`.
#[pyfunction]
#[pyo3(signature = (clips, seed = 0, pais = vec!["print".to_string()], preset = "desk"))]
fn make_dataset(clips: usize, seed: u64, pais: Vec<String>, preset: &str) -> PyResult<Vec<Clip>> {
    let modes = pais.iter().map(|p| spoof_mode(p)).collect::<PyResult<Vec<_>>>()?;
    let out = synth::make_dataset(&synth_config(preset)?, clips, seed, &modes).py()?;
    Ok(out.into_iter().map(|inner| Clip { inner }).collect())
}

#[pyfunction]
fn save_dataset(clips: Vec<Clip>, dir: &str) -> PyResult<()> {
    let inner: Vec<SyntheticClip> = clips.into_iter().map(|c| c.inner).collect();
    synth::save_dataset(&inner, dir).py()
}

#[pyfunction]
fn load_dataset(dir: &str) -> PyResult<Vec<Clip>> {
    Ok(synth::load_dataset(dir).py()?.into_iter().map(|inner| Clip { inner }).collect())
}

fn unwrap_clips(clips: &[Clip]) -> Vec<SyntheticClip> {
    clips.iter().map(|c| c.inner.clone()).collect()
}

/// Single-frame depth network.
#[pyclass(module = "depthpad_py")]
struct Backbone {
    inner: CoreBackbone,
}

#[pymethods]
impl Backbone {
    #[new]
    #[pyo3(signature = (preset = "desk", seed = 0))]
    fn new(preset: &str, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: CoreBackbone::new(self::preset(preset)?.backbone(), seed).py()?,
        })
    }

    #[staticmethod]
    fn load(stem: &str) -> PyResult<Self> {
        Ok(Self {
            inner: trainer::load_backbone(stem).py()?,
        })
    }

    /// Writes `<stem>.bin` and `<stem>.json`; returns the SHA-256 of the values.
    fn save(&self, stem: &str) -> PyResult<String> {
        trainer::save_backbone(&self.inner, stem).py()
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.params().numel()
    }

    fn digest(&self) -> String {
        self.inner.params().digest()
    }

    /// Depth map of frame `index` of `clip`.
    #[pyo3(signature = (clip, index = 0))]
    fn predict(&self, clip: &Clip, index: usize) -> PyResult<Vec<Vec<f64>>> {
        if index >= clip.inner.frames.len() {
            return Err(PyValueError::new_err(format!("clip has {} frames", clip.inner.frames.len())));
        }
        let d = depthpad::backbone::backbone_forward(&self.inner, &clip.inner.frame_tensor(index)).py()?;
        Ok(rows(d.data(), d.size()))
    }

    /// Trains on every frame of `clips`; returns the overall loss per step.
    #[pyo3(signature = (clips, steps = 300, batch_size = 4, seed = 0, lr = 1.0))]
    fn train(&mut self, py: Python<'_>, clips: Vec<Clip>, steps: usize, batch_size: usize, seed: u64, lr: f64) -> PyResult<Vec<f64>> {
        let mut cfg = TrainConfig::desk_stage1();
        cfg.steps = steps;
        cfg.batch_size = batch_size;
        cfg.seed = seed;
        cfg.optimizer.lr = lr;
        let samples = trainer::frame_samples(&unwrap_clips(&clips));
        let backbone = &mut self.inner;
        let curve = py.detach(|| trainer::train_stage1(&cfg, backbone, &samples)).py()?;
        Ok(curve.overall())
    }
}

/// Multi-frame module trained on top of a frozen backbone.
#[pyclass(module = "depthpad_py")]
struct Stpm {
    inner: CoreStpm,
}

#[pymethods]
impl Stpm {
    #[new]
    #[pyo3(signature = (backbone, preset = "desk", seed = 0))]
    fn new(backbone: &Backbone, preset: &str, seed: u64) -> PyResult<Self> {
        let cfg = backbone.inner.config();
        let inner = CoreStpm::new(self::preset(preset)?.stpm(), &backbone.inner.level_channels(), cfg.depth_size, seed).py()?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(stem: &str) -> PyResult<Self> {
        Ok(Self {
            inner: trainer::load_stpm(stem).py()?.0,
        })
    }

    fn save(&self, stem: &str, backbone: &Backbone) -> PyResult<String> {
        trainer::save_stpm(&self.inner, backbone.inner.config(), stem).py()
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.params().numel()
    }

    fn digest(&self) -> String {
        self.inner.params().digest()
    }

    /// Trains with the backbone frozen; returns the overall loss per step.
    #[pyo3(signature = (backbone, clips, steps = 300, batch_size = 4, seed = 0, lr = 1.0, beta = 0.8))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        &mut self,
        py: Python<'_>,
        backbone: &Backbone,
        clips: Vec<Clip>,
        steps: usize,
        batch_size: usize,
        seed: u64,
        lr: f64,
        beta: f64,
    ) -> PyResult<Vec<f64>> {
        let mut cfg = TrainConfig::desk_stage2();
        cfg.steps = steps;
        cfg.batch_size = batch_size;
        cfg.seed = seed;
        cfg.optimizer.lr = lr;
        cfg.beta = beta;
        let clips = unwrap_clips(&clips);
        let (bb, stpm) = (&backbone.inner, &mut self.inner);
        let curve = py.detach(|| trainer::train_stage2(&cfg, bb, stpm, &clips)).py()?;
        Ok(curve.overall())
    }

    /// Living score of every clip as `(id, label, pai, score)`.
    #[pyo3(signature = (backbone, clips, frames = 5, beta = 0.8))]
    fn score(&self, py: Python<'_>, backbone: &Backbone, clips: Vec<Clip>, frames: usize, beta: f64) -> PyResult<Vec<RecordTuple>> {
        let clips = unwrap_clips(&clips);
        let (bb, stpm) = (&backbone.inner, &self.inner);
        let out = py.detach(|| trainer::score_clips(bb, stpm, &clips, frames, beta)).py()?;
        Ok(out.iter().map(record_tuple).collect())
    }
}

/// Runs the invariant suites; returns `(suite, check, passed, detail)` rows.
#[pyfunction]
#[pyo3(signature = (suite = "all", seed = 0))]
fn run_checks(py: Python<'_>, suite: &str, seed: u64) -> PyResult<Vec<(String, String, bool, String)>> {
    let suites: Vec<Suite> = if suite == "all" {
        Suite::ALL.to_vec()
    } else {
        vec![suite.parse::<Suite>().py()?]
    };
    let opts = CheckOptions {
        seed,
        ..CheckOptions::default()
    };
    let reports = py
        .detach(|| suites.into_iter().map(|s| run_suite(s, &opts)).collect::<depthpad::Result<Vec<_>>>())
        .py()?;
    Ok(reports
        .iter()
        .flat_map(|r| {
            r.checks
                .iter()
                .map(move |c| (r.suite.to_string(), c.name.clone(), c.passed, c.detail.clone()))
        })
        .collect())
}

#[pymodule]
fn depthpad_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Scene>()?;
    m.add_class::<Clip>()?;
    m.add_class::<Backbone>()?;
    m.add_class::<Stpm>()?;
    m.add_function(wrap_pyfunction!(estimate_step, m)?)?;
    m.add_function(wrap_pyfunction!(edl, m)?)?;
    m.add_function(wrap_pyfunction!(cdl, m)?)?;
    m.add_function(wrap_pyfunction!(overall_loss, m)?)?;
    m.add_function(wrap_pyfunction!(refine_depth, m)?)?;
    m.add_function(wrap_pyfunction!(compute_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(sweep_thresholds, m)?)?;
    m.add_function(wrap_pyfunction!(select_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(make_clip, m)?)?;
    m.add_function(wrap_pyfunction!(make_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(save_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(load_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(run_checks, m)?)?;
    Ok(())
}
