use depthpad::geometry::{
    classify_scene, estimate_relative_depth, observe, replay_distortion, simulate_positions, CarrierMotion, DepthEstimate,
    SceneMode, SceneSpec, Verdict,
};
use proptest::prelude::*;

fn attack(mode: SceneMode, d1: f64, d2: f64, dx: f64, dv: f64, za: f64, zb: f64) -> SceneSpec {
    SceneSpec {
        mode,
        z_a: za,
        z_b: zb,
        f_a: 2.0,
        f_b: 1.5,
        dv: CarrierMotion::Constant(dv),
        ..SceneSpec::live(1.0, 10.0, d1, d2, dx, 4)
    }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

proptest! {
    #[test]
    fn live_scene_recovers_ratio(
        f in 0.5f64..5.0,
        z in 5.0f64..100.0,
        d2 in 0.05f64..5.0,
        frac in 0.01f64..0.99,
        dx in 0.01f64..1.0,
    ) {
        let scene = SceneSpec::live(f, z, frac * d2, d2, dx, 4);
        let obs = observe(&scene).unwrap();
        let sim = simulate_positions(&scene).unwrap();
        for (a, b) in obs.steps.iter().zip(&sim.steps) {
            for i in 0..3 {
                prop_assert!(close(a[i], b[i], 1e-9));
            }
            let u = [f * dx / z, f * dx / (z + frac * d2), f * dx / (z + d2)];
            for i in 0..3 {
                prop_assert!(close(a[i], u[i], 1e-12));
            }
        }
        for e in estimate_relative_depth(&obs) {
            match e {
                DepthEstimate::Ratio(r) => prop_assert!(close(r, frac, 1e-9), "{r} vs {frac}"),
                other => prop_assert!(false, "{other:?}"),
            }
        }
    }

    #[test]
    fn print_is_planar(
        d2 in 0.05f64..5.0,
        dx in -1.0f64..1.0,
        dv in 0.01f64..1.0,
        za in 5.0f64..50.0,
        zb in 5.0f64..50.0,
    ) {
        let scene = attack(SceneMode::Print, 0.3 * d2, d2, dx, dv, za, zb);
        let obs = observe(&scene).unwrap();
        prop_assert!(estimate_relative_depth(&obs).iter().all(|e| *e == DepthEstimate::Planar));
        prop_assert_eq!(classify_scene(&estimate_relative_depth(&obs), scene.tolerance).unwrap(), Verdict::Spoof);
    }

    #[test]
    fn replay_ratio_is_distorted(
        d2 in 0.5f64..5.0,
        dx in 0.05f64..1.0,
        dv in 0.0f64..0.5,
        za in 5.0f64..50.0,
        zb in 5.0f64..50.0,
    ) {
        let d1 = 0.4 * d2;
        let scene = attack(SceneMode::Replay, d1, d2, dx, dv, za, zb);
        let obs = observe(&scene).unwrap();
        let sim = simulate_positions(&scene).unwrap();
        for (k, (a, b)) in obs.steps.iter().zip(&sim.steps).enumerate() {
            for i in 0..3 {
                prop_assert!(close(a[i], b[i], 1e-9));
            }
            // Carrier image of each point: recorded displacement plus carrier travel, scaled by f_b / z_b.
            let u: Vec<f64> = [za, za + d1, za + d2].iter().map(|z| 1.5 / zb * (2.0 * dx / z + dv)).collect();
            let expected = (u[0] / u[1] - 1.0) / (u[0] / u[2] - 1.0);
            match estimate_relative_depth(&obs)[k] {
                DepthEstimate::Ratio(r) => {
                    prop_assert!(close(r, expected, 1e-9));
                    prop_assert!(close(r, d1 / d2 * replay_distortion(&scene, k), 1e-9));
                }
                other => prop_assert!(false, "{other:?}"),
            }
        }
    }
}

#[test]
fn varying_carrier_motion_is_caught() {
    let mut scene = attack(SceneMode::Replay, 1.0, 2.0, 0.2, 0.0, 10.0, 10.0);
    scene.dv = CarrierMotion::PerStep(vec![0.0, 0.05, 0.1, 0.2]);
    let est = estimate_relative_depth(&observe(&scene).unwrap());
    let ratios: Vec<f64> = est.iter().map(|e| e.value()).collect();
    assert!(ratios.windows(2).all(|w| w[0] != w[1]));
    assert_eq!(classify_scene(&est, scene.tolerance).unwrap(), Verdict::Spoof);
}

#[test]
fn static_parallel_replay_is_inconclusive() {
    let scene = attack(SceneMode::Replay, 1.0, 2.0, 0.2, 0.0, 10.0, 10.0);
    let est = estimate_relative_depth(&observe(&scene).unwrap());
    assert!(est.iter().all(|e| close(e.value(), 0.5, 1e-12)));
    assert_eq!(classify_scene(&est, scene.tolerance).unwrap(), Verdict::Inconclusive);
}

#[test]
fn degenerate_scenes_are_rejected() {
    assert!(observe(&SceneSpec::live(1.0, 0.0, 1.0, 2.0, 0.1, 4)).is_err());
    assert!(SceneSpec::from_toml_str("mode = \"live\"\nbogus = 1").is_err());
    let one_step = SceneSpec::live(1.0, 10.0, 1.0, 2.0, 0.1, 1);
    let est = estimate_relative_depth(&observe(&one_step).unwrap());
    assert!(classify_scene(&est, 1e-9).is_err());
}
