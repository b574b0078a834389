//! Executable invariant suites with a machine-readable summary.

use std::fmt;
use std::str::FromStr;

use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::backbone::FrameFeatures;
use crate::depth::DepthMap;
use crate::error::{invalid, Result};
use crate::geometry::{
    classify_scene, estimate_relative_depth, observe, random_live_scene, replay_distortion, simulate_positions,
    CarrierMotion, DepthEstimate, SceneMode, SceneSpec, Verdict,
};
use crate::losses::{self, binary_loss_on, cdl_on, cdl_with, edl, edl_on, CdlKernels, FcsHead, Reduction};
use crate::metrics::{compute_metrics, percent, ScoreRecord};
use crate::params::{Bound, Param, ParamSet};
use crate::stpm::{convgru_gates, refine_depth, ConvGruCell, Stpm, StpmConfig};
use crate::tape::{GradTape, Var};
use crate::tensor::{Shape, Tensor};
use crate::Padding;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Geometry,
    Losses,
    Metrics,
    Gradients,
    Architecture,
}

impl Suite {
    pub const ALL: [Suite; 5] = [
        Suite::Geometry,
        Suite::Losses,
        Suite::Metrics,
        Suite::Gradients,
        Suite::Architecture,
    ];
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Suite::Geometry => "geometry",
            Suite::Losses => "losses",
            Suite::Metrics => "metrics",
            Suite::Gradients => "gradients",
            Suite::Architecture => "architecture",
        };
        f.write_str(s)
    }
}

impl FromStr for Suite {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.to_string() == s)
            .ok_or_else(|| invalid(format!("unknown suite {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub passed: bool,
    pub checks: Vec<CheckResult>,
}

#[derive(Clone, Debug)]
pub struct CheckOptions {
    pub seed: u64,
    /// Random live scenes in the geometry suite.
    pub scenes: usize,
    /// Seeds per operation in the gradient suite.
    pub gradient_seeds: usize,
    /// Kernels under test in the loss suite.
    pub kernels: CdlKernels,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            scenes: 100,
            gradient_seeds: 20,
            kernels: CdlKernels::default(),
        }
    }
}

struct Collector(Vec<CheckResult>);

impl Collector {
    fn push(&mut self, name: &str, passed: bool, detail: impl Into<String>) {
        self.0.push(CheckResult {
            name: name.to_owned(),
            passed,
            detail: detail.into(),
        });
    }
}

pub fn run_suite(suite: Suite, opts: &CheckOptions) -> Result<SuiteReport> {
    let mut c = Collector(Vec::new());
    match suite {
        Suite::Geometry => geometry_checks(&mut c, opts)?,
        Suite::Losses => loss_checks(&mut c, opts)?,
        Suite::Metrics => metric_checks(&mut c, opts)?,
        Suite::Gradients => gradient_checks(&mut c, opts)?,
        Suite::Architecture => architecture_checks(&mut c, opts)?,
    }
    Ok(SuiteReport {
        suite,
        passed: c.0.iter().all(|r| r.passed),
        checks: c.0,
    })
}

pub fn run_all(opts: &CheckOptions) -> Result<Vec<SuiteReport>> {
    Suite::ALL.into_iter().map(|s| run_suite(s, opts)).collect()
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

/// Largest relative gap between closed-form and simulated displacements.
pub fn oracle_gap(scene: &SceneSpec) -> Result<f64> {
    let a = observe(scene)?;
    let b = simulate_positions(scene)?;
    let mut worst = 0.0f64;
    for (x, y) in a.steps.iter().zip(&b.steps) {
        for i in 0..3 {
            worst = worst.max((x[i] - y[i]).abs() / x[i].abs().max(y[i].abs()).max(1.0));
        }
    }
    Ok(worst)
}

/// The constructed rotated-carrier configuration: positive coordinates ordered so
/// that `x_m1 > x_l1 (z_a + d1) / z_a`, with the face translating every step.
pub fn constructed_rotated_scene() -> SceneSpec {
    SceneSpec {
        mode: SceneMode::ReplayRotated,
        steps: 4,
        x_l1: 1.0,
        x_m1: 1.5,
        x_r1: 2.0,
        d1: 1.0,
        d2: 2.0,
        dx: 0.2,
        f_a: 10.0,
        z_b: 4.0,
        theta: 0.5,
        ..SceneSpec::live(1.0, 10.0, 1.0, 2.0, 0.2, 4)
    }
}

fn geometry_checks(c: &mut Collector, opts: &CheckOptions) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let (mut worst_ratio, mut worst_oracle) = (0.0f64, 0.0f64);
    for _ in 0..opts.scenes {
        let scene = random_live_scene(&mut rng, 3);
        let truth = scene.d1 / scene.d2;
        for e in estimate_relative_depth(&observe(&scene)?) {
            let err = match e {
                DepthEstimate::Ratio(r) => (r - truth).abs(),
                _ => f64::INFINITY,
            };
            worst_ratio = worst_ratio.max(err);
        }
        worst_oracle = worst_oracle.max(oracle_gap(&scene)?);
    }
    c.push(
        "live_ratio_recovered",
        worst_ratio < 1e-9,
        format!("{} scenes, worst error {worst_ratio:.3e}", opts.scenes),
    );
    c.push(
        "live_oracle_agreement",
        worst_oracle < 1e-12,
        format!("{} scenes, worst gap {worst_oracle:.3e}", opts.scenes),
    );

    let mut print = SceneSpec::live(1.0, 10.0, 1.0, 2.0, 0.5, 4);
    print.mode = SceneMode::Print;
    print.dv = CarrierMotion::Constant(0.3);
    let est = estimate_relative_depth(&observe(&print)?);
    let planar = est.iter().all(|e| *e == DepthEstimate::Planar && e.value() == 0.0);
    c.push("print_planar", planar, format!("{est:?}"));
    c.push(
        "print_verdict_spoof",
        classify_scene(&est, print.tolerance)? == Verdict::Spoof,
        "",
    );

    let mut pss = print.clone();
    pss.mode = SceneMode::Replay;
    pss.dv = CarrierMotion::Constant(0.0);
    let est = estimate_relative_depth(&observe(&pss)?);
    let preserved = est.iter().all(|e| matches!(e, DepthEstimate::Ratio(r) if rel_close(*r, 0.5, 1e-9)));
    c.push("pss_ratio_preserved", preserved, format!("{est:?}"));
    c.push(
        "pss_verdict_inconclusive",
        classify_scene(&est, pss.tolerance)? == Verdict::Inconclusive,
        "",
    );

    let mut replay = pss.clone();
    replay.dv = CarrierMotion::PerStep(vec![0.1, 0.25, -0.2, 0.4]);
    let est = estimate_relative_depth(&observe(&replay)?);
    let mut worst = 0.0f64;
    for (k, e) in est.iter().enumerate() {
        let expected = replay.d1 / replay.d2 * replay_distortion(&replay, k);
        worst = worst.max(match e {
            DepthEstimate::Ratio(r) => (r - expected).abs() / expected.abs().max(1.0),
            _ => f64::INFINITY,
        });
    }
    c.push("replay_distortion_factor", worst < 1e-9, format!("worst gap {worst:.3e}"));
    c.push(
        "replay_verdict_spoof",
        classify_scene(&est, replay.tolerance)? == Verdict::Spoof,
        "",
    );

    let rotated = constructed_rotated_scene();
    let est = estimate_relative_depth(&observe(&rotated)?);
    let ratios: Vec<f64> = est.iter().map(DepthEstimate::value).collect();
    let varies = ratios.windows(2).all(|w| (w[0] - w[1]).abs() > 1e-9);
    let truth = rotated.d1 / rotated.d2;
    let deviates = ratios.iter().all(|r| (r - truth).abs() > 1e-9);
    c.push(
        "rotated_ratio_time_varying",
        ratios.len() >= 3 && varies && deviates,
        format!("{ratios:?}"),
    );

    let mut worst_modes = 0.0f64;
    for mode in [SceneMode::Print, SceneMode::Replay, SceneMode::ReplayRotated] {
        let mut s = rotated.clone();
        s.mode = mode;
        s.dv = CarrierMotion::PerStep(vec![0.1, -0.05, 0.2, 0.0]);
        worst_modes = worst_modes.max(oracle_gap(&s)?);
    }
    c.push(
        "spoof_oracle_agreement",
        worst_modes < 1e-12,
        format!("worst gap {worst_modes:.3e}"),
    );
    Ok(())
}

fn random_map(rng: &mut ChaCha8Rng, size: usize) -> Result<DepthMap> {
    DepthMap::new(size, (0..size * size).map(|_| rng.random::<f64>()).collect())
}

/// Random values on a 1/64 grid, so adding an offset on the same grid is exact.
fn dyadic_map(rng: &mut ChaCha8Rng, size: usize) -> Result<DepthMap> {
    DepthMap::new(
        size,
        (0..size * size).map(|_| f64::from(rng.random_range(0..=32u32)) / 64.0).collect(),
    )
}

fn loss_checks(c: &mut Collector, opts: &CheckOptions) -> Result<()> {
    let sums = opts.kernels.sums();
    c.push("cdl_kernel_sums_zero", sums.iter().all(|&s| s == 0.0), format!("{sums:?}"));

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let (mut zero_iff_equal, mut offset_exact) = (true, true);
    for _ in 0..20 {
        let p = random_map(&mut rng, 8)?;
        let mut g_data = p.data().to_vec();
        let i = rng.random_range(0..g_data.len());
        g_data[i] += if g_data[i] > 0.5 { -0.25 } else { 0.25 };
        let g = DepthMap::new(8, g_data)?;
        zero_iff_equal &= edl(&p, &p)? == 0.0 && cdl_with(&opts.kernels, &p, &p)? == 0.0;
        zero_iff_equal &= edl(&p, &g)? > 0.0 && cdl_with(&opts.kernels, &p, &g)? > 0.0;

        let p = dyadic_map(&mut rng, 8)?;
        let g = dyadic_map(&mut rng, 8)?;
        let shift = f64::from(rng.random_range(0..=16u32)) / 64.0;
        let lift = |m: &DepthMap| DepthMap::new(8, m.data().iter().map(|v| v + shift).collect());
        offset_exact &= cdl_with(&opts.kernels, &lift(&p)?, &lift(&g)?)? == cdl_with(&opts.kernels, &p, &g)?;
    }
    c.push("edl_cdl_zero_iff_equal", zero_iff_equal, "20 random pairs");
    c.push("cdl_offset_invariant", offset_exact, "20 dyadic pairs, exact equality");

    let (b, e, d) = (0.7, 1.3, 2.9);
    let beta = 0.8;
    let overall = losses::overall_loss(b, e, d, beta);
    c.push(
        "overall_loss_weighting",
        overall == beta * b + (1.0 - beta) * (e + d),
        format!("{overall}"),
    );
    Ok(())
}

fn metric_checks(c: &mut Collector, opts: &CheckOptions) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut records = Vec::new();
    for i in 0..40 {
        records.push(ScoreRecord::live(format!("l{i}"), rng.random_range(0.2..1.0))?);
        let pai = if i % 2 == 0 { "print" } else { "replay" };
        records.push(ScoreRecord::attack(format!("a{i}"), pai, rng.random_range(0.0..0.8))?);
    }
    let half = Ratio::new(1, 2);
    let mut exact = true;
    let mut thresholds: Vec<f64> = records.iter().map(|r| r.score).collect();
    thresholds.extend([0.0, 0.5, 1.0, 1.5]);
    for t in &thresholds {
        let m = compute_metrics(&records, *t)?;
        exact &= m.acer == (m.apcer + m.bpcer) * half && m.hter == (m.frr + m.far) * half;
    }
    c.push(
        "acer_hter_identities",
        exact,
        format!("{} thresholds, exact rational arithmetic", thresholds.len()),
    );
    let from_percent = |a: f64, b: f64| (a + b) / 2.0;
    let row = from_percent(2.0, 0.0);
    c.push("acer_from_rates_2_0", row == 1.0, format!("{row}"));
    let row = from_percent(6.36, 2.75);
    c.push("acer_from_rates_6_36_2_75", (row - 4.55).abs() <= 0.01, format!("{row}"));

    // 1 of 50 attacks accepted, no live rejected: APCER 2%, BPCER 0%, ACER 1%.
    let mut table = Vec::new();
    for i in 0..50 {
        table.push(ScoreRecord::live(format!("l{i}"), 0.9)?);
        table.push(ScoreRecord::attack(format!("a{i}"), "print", if i == 0 { 0.9 } else { 0.1 })?);
    }
    let m = compute_metrics(&table, 0.5)?;
    c.push(
        "acer_from_counts",
        percent(m.apcer) == 2.0 && percent(m.bpcer) == 0.0 && percent(m.acer) == 1.0,
        format!("APCER {} BPCER {} ACER {}", percent(m.apcer), percent(m.bpcer), percent(m.acer)),
    );
    Ok(())
}

/// Step of the central differences.
pub const FD_STEP: f64 = 1e-6;
/// Gradients smaller than this are compared absolutely.
pub const FD_FLOOR: f64 = 1e-3;

/// `sum(out * w)` for fixed pseudo-random `w`, to reduce any output to a scalar.
pub fn probe(tape: &mut GradTape, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(out).shape();
    if shape.is_scalar() {
        return Ok(out);
    }
    let w = Tensor::uniform(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9));
    let w = tape.constant(w)?;
    let m = tape.mul(out, w)?;
    Ok(tape.sum(m))
}

/// Largest relative error between backpropagated gradients of `f` with respect to
/// every value in `params` and central finite differences.
pub fn gradient_error(params: &ParamSet, f: &dyn Fn(&mut GradTape, &Bound) -> Result<Var>) -> Result<f64> {
    let mut tape = GradTape::new();
    let bound = params.bind(&mut tape, true)?;
    let out = f(&mut tape, &bound)?;
    let grads = bound.grads(&tape.backward(out)?);
    let eval = |ps: &ParamSet| -> Result<f64> {
        let mut t = GradTape::new();
        let b = ps.bind(&mut t, false)?;
        let o = f(&mut t, &b)?;
        t.value(o).item()
    };
    let mut worst = 0.0f64;
    let mut work = params.clone();
    for (k, g) in grads.iter().enumerate() {
        for j in 0..g.numel() {
            let x = params.values()[k].data()[j];
            work.values_mut()[k].data_mut()[j] = x + FD_STEP;
            let up = eval(&work)?;
            work.values_mut()[k].data_mut()[j] = x - FD_STEP;
            let down = eval(&work)?;
            work.values_mut()[k].data_mut()[j] = x;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let analytic = g.data()[j];
            let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

type GradCase = (&'static str, Box<dyn Fn(u64) -> Result<f64>>);

fn uniform(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, 1.0, rng)
}

fn unary_case(name: &'static str, op: fn(&mut GradTape, Var) -> Result<Var>) -> GradCase {
    (
        name,
        Box::new(move |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut ps = ParamSet::new();
            let x = ps.add("x", uniform(Shape::new(2, 2, 4, 4), &mut rng));
            gradient_error(&ps, &|t, b| {
                let y = op(t, b.var(x))?;
                probe(t, y, seed)
            })
        }),
    )
}

fn binary_case(name: &'static str, op: fn(&mut GradTape, Var, Var) -> Result<Var>) -> GradCase {
    (
        name,
        Box::new(move |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut ps = ParamSet::new();
            let x = ps.add("x", uniform(Shape::new(1, 2, 3, 3), &mut rng));
            let y = ps.add("y", uniform(Shape::new(1, 2, 3, 3), &mut rng));
            gradient_error(&ps, &|t, b| {
                let z = op(t, b.var(x), b.var(y))?;
                probe(t, z, seed)
            })
        }),
    )
}

/// Every differentiable operation and loss, each as a function of the seed.
pub fn gradient_cases() -> Vec<GradCase> {
    let mut cases: Vec<GradCase> = vec![
        unary_case("relu", |t, x| Ok(t.relu(x))),
        unary_case("sigmoid", |t, x| Ok(t.sigmoid(x))),
        unary_case("tanh", |t, x| Ok(t.tanh(x))),
        unary_case("square", |t, x| Ok(t.square(x))),
        unary_case("affine", |t, x| Ok(t.affine(x, -1.5, 0.25))),
        unary_case("sum", |t, x| Ok(t.sum(x))),
        unary_case("max_pool2x2", |t, x| t.max_pool2x2(x)),
        unary_case("sobel_depthwise", |t, x| {
            t.depthwise_conv3x3(x, &Tensor::new(Shape::new(1, 1, 3, 3), crate::gradient::SOBEL_VERTICAL.to_vec())?)
        }),
        unary_case("gradient_magnitude", crate::gradient::gradient_magnitude_on),
        binary_case("add", |t, x, y| t.add(x, y)),
        binary_case("sub", |t, x, y| t.sub(x, y)),
        binary_case("mul", |t, x, y| t.mul(x, y)),
        binary_case("concat_channels", |t, x, y| t.concat_channels(&[x, y])),
        binary_case("mean_of", |t, x, y| t.mean_of(&[x, y, x])),
    ];
    for (name, stride, padding) in [
        ("conv2d_same", 1, Padding::Same),
        ("conv2d_valid", 1, Padding::Valid),
        ("conv2d_stride2", 2, Padding::Same),
    ] {
        cases.push((
            name,
            Box::new(move |seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut ps = ParamSet::new();
                let x = ps.add("x", uniform(Shape::new(2, 2, 5, 5), &mut rng));
                let w = ps.add("w", uniform(Shape::new(3, 2, 3, 3), &mut rng));
                let bias = ps.add("b", uniform(Shape::new(1, 3, 1, 1), &mut rng));
                gradient_error(&ps, &|t, b| {
                    let y = t.conv2d(b.var(x), b.var(w), Some(b.var(bias)), stride, padding)?;
                    probe(t, y, seed)
                })
            }),
        ));
    }
    cases.push((
        "normalize",
        Box::new(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut ps = ParamSet::new();
            let x = ps.add("x", uniform(Shape::new(2, 3, 4, 4), &mut rng));
            let s = ps.add("scale", uniform(Shape::new(1, 3, 1, 1), &mut rng));
            let h = ps.add("shift", uniform(Shape::new(1, 3, 1, 1), &mut rng));
            gradient_error(&ps, &|t, b| {
                let y = t.normalize(b.var(x), b.var(s), b.var(h))?;
                probe(t, y, seed)
            })
        }),
    ));
    cases.push((
        "linear",
        Box::new(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut ps = ParamSet::new();
            let x = ps.add("x", uniform(Shape::new(2, 2, 2, 2), &mut rng));
            let w = ps.add("w", uniform(Shape::new(3, 8, 1, 1), &mut rng));
            let bias = ps.add("b", uniform(Shape::new(1, 3, 1, 1), &mut rng));
            gradient_error(&ps, &|t, b| {
                let y = t.linear(b.var(x), b.var(w), b.var(bias))?;
                probe(t, y, seed)
            })
        }),
    ));
    cases.push((
        "softmax_cross_entropy",
        Box::new(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut ps = ParamSet::new();
            let x = ps.add("logits", Tensor::uniform(Shape::new(3, 2, 1, 1), 3.0, &mut rng));
            let labels = [0, 1, (seed % 2) as usize];
            gradient_error(&ps, &|t, b| t.softmax_cross_entropy(b.var(x), &labels))
        }),
    ));
    for reduction in [Reduction::Sum, Reduction::Mean] {
        let tag = match reduction {
            Reduction::Sum => "sum",
            Reduction::Mean => "mean",
        };
        let name: &'static str = if tag == "sum" { "edl_sum" } else { "edl_mean" };
        cases.push((
            name,
            Box::new(move |seed| {
                let (ps, p, g) = map_pair(seed);
                gradient_error(&ps, &|t, b| edl_on(t, b.var(p), b.var(g), reduction))
            }),
        ));
        let name: &'static str = if tag == "sum" { "cdl_sum" } else { "cdl_mean" };
        cases.push((
            name,
            Box::new(move |seed| {
                let (ps, p, g) = map_pair(seed);
                let k = CdlKernels::default();
                gradient_error(&ps, &|t, b| cdl_on(t, &k, b.var(p), b.var(g), reduction))
            }),
        ));
    }
    cases.push((
        "binary_loss",
        Box::new(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut ps = ParamSet::new();
            let maps: Vec<Param> = (0..3)
                .map(|i| ps.add(format!("map{i}"), Tensor::uniform(Shape::new(1, 1, 4, 4), 1.0, &mut rng)))
                .collect();
            let head = FcsHead::new(&mut ps, "fcs", 16, 6, &mut rng);
            let live = seed % 2 == 0;
            gradient_error(&ps, &|t, b| {
                let vars: Vec<Var> = maps.iter().map(|&m| b.var(m)).collect();
                Ok(binary_loss_on(t, b, &head, &vars, live)?.0)
            })
        }),
    ));
    cases
}

fn map_pair(seed: u64) -> (ParamSet, Param, Param) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamSet::new();
    let p = ps.add("pred", Tensor::uniform(Shape::new(1, 1, 6, 6), 1.0, &mut rng));
    let g = ps.add("gt", Tensor::uniform(Shape::new(1, 1, 6, 6), 1.0, &mut rng));
    (ps, p, g)
}

/// Relative error bound of the gradient suite.
pub const GRADIENT_TOLERANCE: f64 = 1e-4;

fn gradient_checks(c: &mut Collector, opts: &CheckOptions) -> Result<()> {
    for (name, case) in gradient_cases() {
        let mut worst = 0.0f64;
        for s in 0..opts.gradient_seeds as u64 {
            worst = worst.max(case(opts.seed.wrapping_add(s))?);
        }
        c.push(
            name,
            worst < GRADIENT_TOLERANCE,
            format!("{} seeds, worst relative error {worst:.3e}", opts.gradient_seeds),
        );
    }
    Ok(())
}

fn architecture_checks(c: &mut Collector, opts: &CheckOptions) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut bounded = true;
    for _ in 0..20 {
        let a = random_map(&mut rng, 8)?;
        let b = random_map(&mut rng, 8)?;
        let alpha = rng.random::<f64>();
        let r = refine_depth(&a, &b, alpha)?;
        for i in 0..r.data().len() {
            let (x, y, v) = (a.data()[i], b.data()[i], r.data()[i]);
            bounded &= x.min(y) <= v && v <= x.max(y);
        }
    }
    c.push("refine_depth_convex_bounds", bounded, "20 random pairs");

    let mut ps = ParamSet::new();
    let cell = ConvGruCell::new(&mut ps, "gru", 2, 3, &mut rng);
    let h = uniform(Shape::new(1, 3, 5, 5), &mut rng);
    let x = uniform(Shape::new(1, 2, 5, 5), &mut rng);
    let step = convgru_gates(&cell, &ps, &h, &x)?;
    let open = |t: &Tensor| t.data().iter().all(|&v| v > 0.0 && v < 1.0);
    c.push("gru_gates_open_interval", open(&step.reset) && open(&step.update), "");

    ps.get_mut(cell.update_bias).data_mut().fill(-30.0);
    let keep = convgru_gates(&cell, &ps, &h, &x)?;
    let gap = keep.hidden.zip_map(&h, "gap", |a, b| (a - b).abs())?.max_abs();
    c.push("gru_update_closed_keeps_state", gap < 1e-9, format!("max gap {gap:.3e}"));
    ps.get_mut(cell.update_bias).data_mut().fill(30.0);
    let take = convgru_gates(&cell, &ps, &h, &x)?;
    let gap = take.hidden.zip_map(&take.candidate, "gap", |a, b| (a - b).abs())?.max_abs();
    c.push("gru_update_open_takes_candidate", gap < 1e-9, format!("max gap {gap:.3e}"));

    let level_channels = [3, 4];
    let stpm = Stpm::new(StpmConfig::desk(), &level_channels, 4, opts.seed)?;
    let clip: Vec<FrameFeatures> = (0..5)
        .map(|_| FrameFeatures {
            levels: vec![uniform(Shape::new(1, 3, 8, 8), &mut rng), uniform(Shape::new(1, 4, 4, 4), &mut rng)],
            depth: Tensor::uniform(Shape::new(1, 1, 4, 4), 0.5, &mut rng).map(|v| v + 0.5),
        })
        .collect();
    let pred = stpm.predict(&clip)?;
    c.push(
        "stpm_refined_count",
        pred.refined.len() == 4,
        format!("{} maps for 5 frames", pred.refined.len()),
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names_round_trip() {
        for s in Suite::ALL {
            assert_eq!(s.to_string().parse::<Suite>().unwrap(), s);
        }
        assert!("nope".parse::<Suite>().is_err());
    }

    #[test]
    fn fast_suites_pass() {
        let opts = CheckOptions {
            scenes: 10,
            gradient_seeds: 1,
            ..CheckOptions::default()
        };
        for s in Suite::ALL {
            let r = run_suite(s, &opts).unwrap();
            assert!(r.passed, "{:#?}", r);
        }
    }

    #[test]
    fn corrupted_kernel_fails_sum_check() {
        let mut masks = *CdlKernels::default().masks();
        masks[3][4] += 1.0;
        let opts = CheckOptions {
            kernels: CdlKernels::from_masks_unchecked(masks),
            ..CheckOptions::default()
        };
        let r = run_suite(Suite::Losses, &opts).unwrap();
        assert!(!r.passed);
        assert!(!r.checks.iter().find(|c| c.name == "cdl_kernel_sums_zero").unwrap().passed);
    }
}
