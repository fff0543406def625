use slipctl::analysis::psi;
use slipctl::controllers::{simulate_frozen_barrier_loop, LyapunovState};
use slipctl::friction::{dry_asphalt, wet_asphalt, SurfaceSet};
use slipctl::plant::VehicleParams;
use slipctl::scenario::{batch, run, ControllerKind, Event, ReferenceValue, ScenarioConfig, SurfaceSegment};

fn optimal(surface: &str) -> f64 {
    SurfaceSet::presets().get(surface).unwrap().optimal_slip().unwrap().slip
}

/// Protocol run with the reference moved to a fraction of the optimum.
fn backed_off(surface: &str, v0: f64, fraction: f64, kind: ControllerKind) -> ScenarioConfig {
    let mut cfg = ScenarioConfig::protocol(surface, v0, kind);
    cfg.events[0] =
        Event::ReferenceStep { time: 1.0, value: ReferenceValue::Slip(fraction * optimal(surface)) };
    cfg
}

#[test]
fn frozen_barrier_loop_descends_and_converges() {
    let p = VehicleParams::default();
    for (surface, lambda_bar) in [(dry_asphalt(), 0.1), (wet_asphalt(), 0.08)] {
        for offset in [0.05, -0.05] {
            let state = LyapunovState::new(3.0, 0.0, 1500.0, psi(lambda_bar, &p, &surface)).unwrap();
            let tr = simulate_frozen_barrier_loop(
                &p,
                &surface,
                30.0,
                &state,
                lambda_bar,
                lambda_bar + offset,
                1e-3,
                5.0,
            )
            .unwrap();
            for w in tr.windows(2) {
                assert!(w[1].w_value - w[0].w_value <= 1e-8, "W rose at t = {}", w[1].t);
            }
            let last = tr.last().unwrap();
            assert!((last.lambda - lambda_bar).abs() < 0.01 * lambda_bar);
        }
    }
}

#[test]
fn barrier_law_tracks_stable_branch_reference() {
    for surface in ["dry", "wet"] {
        for v0 in [20.0, 30.0] {
            let out = run(&backed_off(surface, v0, 0.6, ControllerKind::Lyapunov)).unwrap();
            let m = &out.metrics;
            assert!(m.settle_time.is_some(), "{surface} {v0}: {}", m.summary());
            assert!(m.recovery_time.is_some(), "{surface} {v0}: {}", m.summary());
        }
    }
}

#[test]
fn pid_tracks_optimal_slip_through_disturbance() {
    let out = run(&ScenarioConfig::protocol("dry", 30.0, ControllerKind::Pid)).unwrap();
    let m = &out.metrics;
    assert!(m.settle_time.unwrap() < 0.5);
    assert!(m.recovery_time.unwrap() < 0.5);
    assert!(m.stopped);
    let relay = out.controllers[0].relay.unwrap();
    assert!(relay.converged && relay.p_u > 0.05 && relay.p_u < 0.12);
}

#[test]
fn runs_are_bit_identical() {
    let mut cfg = ScenarioConfig::protocol("wet", 20.0, ControllerKind::Pid);
    cfg.noise.slip_sigma = 0.01;
    cfg.noise.seed = 42;
    let a = run(&cfg).unwrap();
    let b = run(&cfg).unwrap();
    assert_eq!(a.trace.to_csv_string(), b.trace.to_csv_string());
    assert_eq!(a.metrics.csv_row(), b.metrics.csv_row());
}

#[test]
fn noiseless_runs_ignore_the_seed() {
    let mut cfg = ScenarioConfig::protocol("snow", 20.0, ControllerKind::Lyapunov);
    cfg.duration = 4.0;
    let a = run(&cfg).unwrap();
    cfg.noise.seed = 999;
    let b = run(&cfg).unwrap();
    assert_eq!(a.trace.to_csv_string(), b.trace.to_csv_string());
}

#[test]
fn noise_changes_with_seed() {
    let mut cfg = ScenarioConfig::protocol("snow", 20.0, ControllerKind::Pid);
    cfg.duration = 3.0;
    cfg.noise.slip_sigma = 0.01;
    let a = run(&cfg).unwrap();
    cfg.noise.seed = 1;
    let b = run(&cfg).unwrap();
    assert_ne!(a.trace.to_csv_string(), b.trace.to_csv_string());
}

#[test]
fn braking_never_accelerates_and_distance_matches_speed_integral() {
    let out = run(&ScenarioConfig::protocol("dry", 30.0, ControllerKind::Pid)).unwrap();
    let rows = &out.trace.rows;
    for w in rows.windows(2) {
        assert!(w[1].v <= w[0].v);
    }
    let dt = rows[1].t - rows[0].t;
    let mut trapz: f64 = rows.windows(2).map(|w| 0.5 * (w[0].v + w[1].v) * dt).sum();
    trapz += 0.5 * (rows.last().unwrap().v + out.trace.final_state.v) * dt;
    let d = out.metrics.stop_distance;
    assert!((trapz - d).abs() / d < 1e-3, "{trapz} vs {d}");
}

#[test]
fn singleton_batch_matches_run() {
    let cfg = ScenarioConfig::protocol("wet", 10.0, ControllerKind::Pid);
    let single = run(&cfg).unwrap();
    let batched = batch(std::slice::from_ref(&cfg));
    assert_eq!(batched.len(), 1);
    assert_eq!(batched[0].as_ref().unwrap().trace.to_csv_string(), single.trace.to_csv_string());
}

#[test]
fn batch_outputs_follow_input_permutation() {
    let configs: Vec<ScenarioConfig> = (0..100)
        .map(|i| {
            let mut c = ScenarioConfig::protocol(
                ["dry", "wet", "snow"][i % 3],
                10.0 + (i % 21) as f64,
                ControllerKind::Pid,
            );
            c.duration = 1.6;
            c.events.truncate(1);
            c.controller.pid.gains =
                Some(slipctl::controllers::PidGains { kp: 3000.0, ki: 60000.0, kd: 30.0 });
            c
        })
        .collect();
    let forward = batch(&configs);
    let mut order: Vec<usize> = (0..configs.len()).collect();
    order.reverse();
    order.swap(3, 70);
    let shuffled: Vec<ScenarioConfig> = order.iter().map(|&i| configs[i].clone()).collect();
    let back = batch(&shuffled);
    for (pos, &i) in order.iter().enumerate() {
        assert_eq!(
            back[pos].as_ref().unwrap().trace.to_csv_string(),
            forward[i].as_ref().unwrap().trace.to_csv_string()
        );
    }
}

#[test]
fn batch_isolates_failing_scenarios() {
    let good = ScenarioConfig { duration: 0.5, ..ScenarioConfig::default() };
    let bad = ScenarioConfig { dt: -1.0, ..good.clone() };
    let res = batch(&[good.clone(), bad, good]);
    assert!(res[0].is_ok() && res[1].is_err() && res[2].is_ok());
}

#[test]
fn crisp_blend_reproduces_single_controller() {
    for kind in [ControllerKind::Pid, ControllerKind::Lyapunov] {
        let single = ScenarioConfig::protocol("dry", 30.0, kind);
        let mut blended = single.clone();
        blended.controller.blend = true;
        let a = run(&single).unwrap();
        let b = run(&blended).unwrap();
        assert_eq!(a.trace.rows.len(), b.trace.rows.len());
        for (x, y) in a.trace.rows.iter().zip(&b.trace.rows) {
            assert_eq!(
                (x.t, x.v, x.w, x.lambda, x.lambda_ref.to_bits(), x.tb_cmd, x.tb_applied),
                (y.t, y.v, y.w, y.lambda, y.lambda_ref.to_bits(), y.tb_cmd, y.tb_applied)
            );
        }
    }
}

#[test]
fn surface_switch_changes_friction_mid_run() {
    let mut cfg = ScenarioConfig::protocol("dry", 30.0, ControllerKind::Pid);
    cfg.surface_timeline.push(SurfaceSegment { time: 2.5, surface: "snow".into() });
    let out = run(&cfg).unwrap();
    let before = out.trace.rows.iter().find(|r| r.t >= 2.4).unwrap();
    let after = out.trace.rows.iter().find(|r| r.t >= 2.5).unwrap();
    assert_eq!(before.lambda_opt_true, optimal("dry"));
    assert_eq!(after.lambda_opt_true, optimal("snow"));
    assert!(after.mu < 0.25);
}
