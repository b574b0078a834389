//! Pinhole geometry of three facial points under vertical motion, observed either
//! directly (live) or through a printed or replayed attack carrier.
//!
//! Point `N_l` sits at distance `z`, `N_m` and `N_r` sit `d1` and `d2` further away.
//! Attack scenes record the face with camera `(f_a, z_a)`, show it on a carrier at
//! distance `z_b` that may translate by `dv` per step or be tilted by `theta`, and
//! observe the carrier with camera `f_b`.

use std::fmt;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative tolerance for treating three displacements as equal.
pub const PLANAR_TOLERANCE: f64 = 1e-12;
/// Threshold below which a ratio denominator counts as vanished.
pub const DENOMINATOR_TOLERANCE: f64 = 1e-12;

/// `u = f * x / z`.
pub fn project(x: f64, z: f64, f: f64) -> Result<f64> {
    if !(z > 0.0) {
        return Err(Error::InvalidScene(format!("projection needs z > 0, got {z}")));
    }
    Ok(f * x / z)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneMode {
    Live,
    Print,
    Replay,
    ReplayRotated,
}

impl fmt::Display for SceneMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SceneMode::Live => "live",
            SceneMode::Print => "print",
            SceneMode::Replay => "replay",
            SceneMode::ReplayRotated => "replay_rotated",
        };
        f.write_str(s)
    }
}

/// Carrier translation: one value for every step or one per step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CarrierMotion {
    Constant(f64),
    PerStep(Vec<f64>),
}

impl Default for CarrierMotion {
    fn default() -> Self {
        CarrierMotion::Constant(0.0)
    }
}

impl CarrierMotion {
    pub fn at(&self, step: usize) -> f64 {
        match self {
            CarrierMotion::Constant(v) => *v,
            CarrierMotion::PerStep(v) => v[step],
        }
    }
}

fn one() -> f64 {
    1.0
}
fn ten() -> f64 {
    10.0
}
fn default_steps() -> usize {
    4
}
fn default_tolerance() -> f64 {
    1e-9
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub mode: SceneMode,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "one")]
    pub f: f64,
    #[serde(default = "ten")]
    pub z: f64,
    #[serde(default)]
    pub d1: f64,
    #[serde(default = "one")]
    pub d2: f64,
    /// Vertical facial motion per step. Ignored in print mode.
    #[serde(default)]
    pub dx: f64,
    #[serde(default)]
    pub x_l1: f64,
    #[serde(default)]
    pub x_m1: f64,
    #[serde(default)]
    pub x_r1: f64,
    #[serde(default = "one")]
    pub f_a: f64,
    #[serde(default = "ten")]
    pub z_a: f64,
    #[serde(default = "one")]
    pub f_b: f64,
    #[serde(default = "ten")]
    pub z_b: f64,
    #[serde(default)]
    pub dv: CarrierMotion,
    #[serde(default)]
    pub theta: f64,
    /// Ratio variance above which a clip is called a spoof.
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
}

impl SceneSpec {
    /// A live scene with the given optics and motion; points start at the origin row.
    pub fn live(f: f64, z: f64, d1: f64, d2: f64, dx: f64, steps: usize) -> Self {
        Self {
            mode: SceneMode::Live,
            steps,
            f,
            z,
            d1,
            d2,
            dx,
            x_l1: 0.0,
            x_m1: 0.0,
            x_r1: 0.0,
            f_a: 1.0,
            z_a: 10.0,
            f_b: 1.0,
            z_b: 10.0,
            dv: CarrierMotion::Constant(0.0),
            theta: 0.0,
            tolerance: default_tolerance(),
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let spec: SceneSpec = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Facial motion actually applied: zero for print scenes.
    pub fn effective_dx(&self) -> f64 {
        if self.mode == SceneMode::Print {
            0.0
        } else {
            self.dx
        }
    }

    pub fn dv_at(&self, step: usize) -> f64 {
        self.dv.at(step)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidScene(m));
        let values = [
            self.f, self.z, self.d1, self.d2, self.dx, self.x_l1, self.x_m1, self.x_r1, self.f_a, self.z_a, self.f_b,
            self.z_b, self.theta, self.tolerance,
        ];
        if values.iter().any(|v| !v.is_finite()) {
            return bad("all scene parameters must be finite".into());
        }
        for (name, v) in [("f", self.f), ("z", self.z), ("f_a", self.f_a), ("z_a", self.z_a), ("f_b", self.f_b), ("z_b", self.z_b)] {
            if v <= 0.0 {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if self.d1 < 0.0 || self.d2 <= 0.0 {
            return bad(format!("need d1 >= 0 and d2 > 0, got d1 = {} and d2 = {}", self.d1, self.d2));
        }
        if self.theta.abs() >= std::f64::consts::FRAC_PI_2 {
            return bad(format!("|theta| must be below pi/2, got {}", self.theta));
        }
        if self.steps == 0 {
            return bad("steps must be at least 1".into());
        }
        if self.tolerance < 0.0 {
            return bad("tolerance must be nonnegative".into());
        }
        if let CarrierMotion::PerStep(v) = &self.dv {
            if v.len() != self.steps {
                return bad(format!("dv lists {} values for {} steps", v.len(), self.steps));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return bad("dv values must be finite".into());
            }
        }
        if self.mode == SceneMode::ReplayRotated {
            let s = self.theta.sin();
            for k in 0..=self.steps {
                for p in self.carrier_coordinates(k) {
                    if p <= 0.0 {
                        return bad(format!("rotated carrier needs positive coordinates, got {p} at step {k}"));
                    }
                    if self.z_b - p * s <= 0.0 {
                        return bad(format!("carrier point {p} at step {k} falls behind the camera"));
                    }
                }
            }
        }
        Ok(())
    }

    /// Recording-plane coordinates of the three points after `k` steps of facial motion.
    pub fn recorded_coordinates(&self, k: usize) -> [f64; 3] {
        let shift = k as f64 * self.effective_dx();
        let depths = [self.z_a, self.z_a + self.d1, self.z_a + self.d2];
        let xs = [self.x_l1, self.x_m1, self.x_r1];
        std::array::from_fn(|i| self.f_a * (xs[i] + shift) / depths[i])
    }

    /// Cumulative carrier translation after `k` steps.
    pub fn carrier_offset(&self, k: usize) -> f64 {
        (0..k).map(|j| self.dv_at(j)).sum()
    }

    /// Positions along the carrier surface after `k` steps.
    pub fn carrier_coordinates(&self, k: usize) -> [f64; 3] {
        let v = self.carrier_offset(k);
        self.recorded_coordinates(k).map(|u| u + v)
    }
}

/// Per-step observed displacements `(du_l, du_m, du_r)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub steps: Vec<[f64; 3]>,
}

/// Closed-form displacements for every step of the scene.
pub fn observe(scene: &SceneSpec) -> Result<Observation> {
    scene.validate()?;
    let dx = scene.effective_dx();
    let steps = (0..scene.steps)
        .map(|k| match scene.mode {
            SceneMode::Live => {
                let depths = [scene.z, scene.z + scene.d1, scene.z + scene.d2];
                depths.map(|z| scene.f * dx / z)
            }
            SceneMode::Print | SceneMode::Replay => {
                let dv = scene.dv_at(k);
                let (fa, fb, za, zb) = (scene.f_a, scene.f_b, scene.z_a, scene.z_b);
                [za, za + scene.d1, za + scene.d2].map(|z| (fa * fb * dx + z * fb * dv) / (z * zb))
            }
            SceneMode::ReplayRotated => {
                let (s, c) = scene.theta.sin_cos();
                let zb = scene.z_b;
                let p1 = scene.carrier_coordinates(k);
                let p2 = scene.carrier_coordinates(k + 1);
                std::array::from_fn(|i| {
                    let tilted = (p2[i] - p1[i]) * zb * zb * c / ((zb - p1[i] * s) * (zb - p2[i] * s));
                    scene.f_b / zb * tilted
                })
            }
        })
        .collect();
    Ok(Observation { steps })
}

/// Tilt factors `(beta1, beta2)` of a rotated carrier at `step`: products of the
/// foreshortening terms of `N_m` and `N_r` over those of `N_l`.
pub fn rotation_betas(scene: &SceneSpec, step: usize) -> (f64, f64) {
    let s = scene.theta.sin();
    let p1 = scene.carrier_coordinates(step);
    let p2 = scene.carrier_coordinates(step + 1);
    let a: [f64; 3] = std::array::from_fn(|i| (scene.z_b - p1[i] * s) * (scene.z_b - p2[i] * s));
    (a[1] / a[0], a[2] / a[0])
}

/// `(du_l / du_m * beta1 - 1) / (du_l / du_r * beta2 - 1)`: the estimate seen through
/// a tilted carrier, written with the recorded displacements.
pub fn rotated_ratio(du_l_over_du_m: f64, du_l_over_du_r: f64, beta1: f64, beta2: f64) -> f64 {
    (du_l_over_du_m * beta1 - 1.0) / (du_l_over_du_r * beta2 - 1.0)
}

/// Distortion of the replayed ratio relative to `d1 / d2` at `step`.
pub fn replay_distortion(scene: &SceneSpec, step: usize) -> f64 {
    let dx = scene.effective_dx();
    let dv = scene.dv_at(step);
    (scene.f_a * dx + (scene.z_a + scene.d2) * dv) / (scene.f_a * dx + (scene.z_a + scene.d1) * dv)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DepthEstimate {
    /// Estimated `d1 / d2`.
    Ratio(f64),
    /// All three points moved identically; both offsets are zero.
    Planar,
    /// The ratio formula divides by a vanishing quantity.
    Undefined,
}

impl DepthEstimate {
    pub fn flag(&self) -> &'static str {
        match self {
            DepthEstimate::Ratio(_) => "ratio",
            DepthEstimate::Planar => "planar",
            DepthEstimate::Undefined => "undefined",
        }
    }

    /// Numeric value for reports: the ratio, 0 for planar, NaN for undefined.
    pub fn value(&self) -> f64 {
        match self {
            DepthEstimate::Ratio(r) => *r,
            DepthEstimate::Planar => 0.0,
            DepthEstimate::Undefined => f64::NAN,
        }
    }
}

fn nearly_equal(a: f64, b: f64) -> bool {
    (a - b).abs() <= PLANAR_TOLERANCE * a.abs().max(b.abs())
}

/// Relative depth from one step's displacements.
pub fn estimate_step(du: [f64; 3]) -> DepthEstimate {
    let [l, m, r] = du;
    if du.iter().any(|v| !v.is_finite()) || du.iter().all(|&v| v == 0.0) {
        return DepthEstimate::Undefined;
    }
    if nearly_equal(l, m) && nearly_equal(l, r) {
        return DepthEstimate::Planar;
    }
    if m == 0.0 || r == 0.0 {
        return DepthEstimate::Undefined;
    }
    let num = l / m - 1.0;
    let den = l / r - 1.0;
    if den.abs() < DENOMINATOR_TOLERANCE {
        return DepthEstimate::Undefined;
    }
    DepthEstimate::Ratio(num / den)
}

pub fn estimate_relative_depth(obs: &Observation) -> Vec<DepthEstimate> {
    obs.steps.iter().map(|&du| estimate_step(du)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Live,
    Spoof,
    Inconclusive,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Live => "live",
            Verdict::Spoof => "spoof",
            Verdict::Inconclusive => "inconclusive",
        })
    }
}

fn variance(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n
}

/// Spoof on any planar step or on a ratio that varies by more than `tolerance`
/// (population variance). A steady ratio is inconclusive: a static, parallel replay
/// carrier reproduces the live ratio exactly.
pub fn classify_scene(estimates: &[DepthEstimate], tolerance: f64) -> Result<Verdict> {
    if estimates.len() < 2 {
        return Err(Error::InvalidScene(format!(
            "classification needs at least 2 steps, got {}",
            estimates.len()
        )));
    }
    if estimates.iter().any(|e| matches!(e, DepthEstimate::Planar)) {
        return Ok(Verdict::Spoof);
    }
    let ratios: Vec<f64> = estimates
        .iter()
        .filter_map(|e| match e {
            DepthEstimate::Ratio(r) => Some(*r),
            _ => None,
        })
        .collect();
    if ratios.len() >= 2 && variance(&ratios) > tolerance {
        return Ok(Verdict::Spoof);
    }
    Ok(Verdict::Inconclusive)
}

/// As [`classify_scene`], but assumes no static parallel replay is present, so a
/// steady ratio from at least two steps counts as live.
pub fn classify_scene_excluding_pss(estimates: &[DepthEstimate], tolerance: f64) -> Result<Verdict> {
    let v = classify_scene(estimates, tolerance)?;
    let ratios = estimates.iter().filter(|e| matches!(e, DepthEstimate::Ratio(_))).count();
    Ok(match v {
        Verdict::Inconclusive if ratios >= 2 => Verdict::Live,
        other => other,
    })
}

/// Observation by explicit simulation: place every point, move it, project it through
/// each camera, and difference consecutive image positions.
pub fn simulate_positions(scene: &SceneSpec) -> Result<Observation> {
    scene.validate()?;
    let image = |k: usize| -> Result<[f64; 3]> {
        Ok(match scene.mode {
            SceneMode::Live => {
                let shift = k as f64 * scene.effective_dx();
                [
                    project(scene.x_l1 + shift, scene.z, scene.f)?,
                    project(scene.x_m1 + shift, scene.z + scene.d1, scene.f)?,
                    project(scene.x_r1 + shift, scene.z + scene.d2, scene.f)?,
                ]
            }
            SceneMode::Print | SceneMode::Replay => {
                let on_carrier = scene.carrier_coordinates(k);
                let mut out = [0.0; 3];
                for (o, p) in out.iter_mut().zip(on_carrier) {
                    *o = project(p, scene.z_b, scene.f_b)?;
                }
                out
            }
            SceneMode::ReplayRotated => {
                // The carrier pivots about its point on the optical axis at depth z_b.
                let (s, c) = scene.theta.sin_cos();
                let on_carrier = scene.carrier_coordinates(k);
                let mut out = [0.0; 3];
                for (o, p) in out.iter_mut().zip(on_carrier) {
                    let depth = scene.z_b - p * s;
                    let height = p * c;
                    *o = project(height, depth, scene.f_b)?;
                }
                out
            }
        })
    };
    let positions = (0..=scene.steps).map(image).collect::<Result<Vec<_>>>()?;
    Ok(Observation {
        steps: positions
            .windows(2)
            .map(|w| std::array::from_fn(|i| w[1][i] - w[0][i]))
            .collect(),
    })
}

/// Live scene drawn from `f in [0.5, 5]`, `z in [5, 100]`, `0 < d1 < d2 <= 5`, `dx in [0.01, 1]`.
pub fn random_live_scene<R: Rng + ?Sized>(rng: &mut R, steps: usize) -> SceneSpec {
    let f = rng.random_range(0.5..=5.0);
    let z = rng.random_range(5.0..=100.0);
    let d2 = rng.random_range(0.01..=5.0);
    let d1 = rng.random_range(0.0..d2);
    let dx = rng.random_range(0.01..=1.0);
    let mut s = SceneSpec::live(f, z, d1, d2, dx, steps);
    s.x_l1 = rng.random_range(-1.0..=1.0);
    s.x_m1 = rng.random_range(-1.0..=1.0);
    s.x_r1 = rng.random_range(-1.0..=1.0);
    s
}

/// One row of a simulation sweep.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub step: usize,
    pub du_l: f64,
    pub du_m: f64,
    pub du_r: f64,
    pub ratio_estimate: f64,
    pub flag: &'static str,
}

pub fn sweep(scene: &SceneSpec) -> Result<(Vec<SweepRow>, Verdict)> {
    let obs = observe(scene)?;
    let est = estimate_relative_depth(&obs);
    let rows = obs
        .steps
        .iter()
        .zip(&est)
        .enumerate()
        .map(|(step, (du, e))| SweepRow {
            step,
            du_l: du[0],
            du_m: du[1],
            du_r: du[2],
            ratio_estimate: e.value(),
            flag: e.flag(),
        })
        .collect();
    let verdict = if est.len() >= 2 {
        classify_scene(&est, scene.tolerance)?
    } else {
        Verdict::Inconclusive
    };
    Ok((rows, verdict))
}
