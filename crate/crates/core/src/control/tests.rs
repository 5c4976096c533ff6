use super::*;
use crate::linalg::least_squares;
use crate::meta::Variant;
use crate::nn::Architecture;
use nalgebra::{DMatrix, DVector};

fn rest_target(q: Vec<f64>, horizon: usize) -> Trajectory {
    let d = q.len();
    let mut t = Trajectory::with_capacity(0.01, horizon);
    for _ in 0..horizon {
        t.push(q.clone(), vec![0.0; d], vec![0.0; d], 0.0);
    }
    t
}

fn random_dynamics(bias_head: bool) -> LearnedDynamics {
    let arch = Architecture::tanh(vec![6, 8, 2], bias_head).unwrap();
    let model = MetaModel::new(Variant::Camel, arch, 4, 7, 0.0).unwrap();
    LearnedDynamics::new(model, Normalizer::identity(6)).unwrap()
}

#[test]
fn rest_hold_applies_gravity_compensation() {
    let plant = ManipulatorSystem::by_name("pendulum").unwrap();
    let phi = [1.0, 0.8];
    let q = std::f64::consts::FRAC_PI_2;
    let cfg = TrackingConfig::new(0.5, 0.5, rest_target(vec![q], 200)).unwrap();
    let ff = AnalyticFeedforward {
        system: plant.clone(),
        phi: phi.to_vec(),
    };
    let report = track_fixed(&ff, &plant, &phi, &cfg).unwrap();
    let mg = 0.8 * crate::systems::manipulator::GRAVITY;
    assert!(report.max_error() <= 1e-6);
    assert!(report.realized.u.iter().all(|u| (u - mg).abs() < 1e-6));
}

#[test]
fn open_loop_replay_reproduces_target() {
    let plant = ManipulatorSystem::by_name("cartpole").unwrap();
    let phi = [1.5, 0.3];
    let target = swing_up_target(&plant, &phi, &SwingUpConfig {
        horizon: 50,
        ..Default::default()
    })
    .unwrap();
    let cfg = TrackingConfig::new(0.0, 0.0, target).unwrap();
    let ff = AnalyticFeedforward {
        system: plant.clone(),
        phi: phi.to_vec(),
    };
    let report = track_fixed(&ff, &plant, &phi, &cfg).unwrap();
    assert_eq!(report.len(), 50);
    assert!(report.max_error() < 1e-9, "replay error {}", report.max_error());
}

#[test]
fn friction_free_model_tracks_worse_than_exact_model() {
    let plant = ManipulatorSystem::by_name("cartpole").unwrap();
    let phi = [1.5, 0.3];
    let target = swing_up_target(&plant, &phi, &SwingUpConfig::default()).unwrap();
    let cfg = TrackingConfig::new(0.5, 0.5, target).unwrap();
    let exact = AnalyticFeedforward {
        system: plant.clone(),
        phi: phi.to_vec(),
    };
    let frictionless = AnalyticFeedforward {
        system: plant.with_friction(0.0),
        phi: phi.to_vec(),
    };
    let a = track_fixed(&exact, &plant, &phi, &cfg).unwrap();
    let b = track_fixed(&frictionless, &plant, &phi, &cfg).unwrap();
    assert!(a.rms_error() < b.rms_error());
}

#[test]
fn swing_up_reaches_energy_level() {
    let plant = ManipulatorSystem::by_name("cartpole").unwrap();
    let target = swing_up_target(&plant, &[2.0, 0.3], &SwingUpConfig::default()).unwrap();
    let peak = target.q.iter().map(|q| q[1].abs()).fold(0.0, f64::max);
    assert!(peak > 2.0, "peak angle {peak}");
    let cart = target.q.iter().map(|q| q[0].abs()).fold(0.0, f64::max);
    assert!(cart < 5.0, "cart excursion {cart}");
}

#[test]
fn swing_up_requires_cartpole() {
    let plant = ManipulatorSystem::by_name("arm").unwrap();
    assert!(swing_up_target(&plant, &[0.3, 1.0], &SwingUpConfig::default()).is_err());
}

#[test]
fn negative_gains_rejected() {
    assert!(TrackingConfig::new(-0.1, 0.5, rest_target(vec![0.0], 5)).is_err());
    assert!(TrackingConfig::new(0.1, f64::NAN, rest_target(vec![0.0], 5)).is_err());
    assert!(TrackingConfig::new(0.1, 0.1, Trajectory::with_capacity(0.01, 0)).is_err());
}

#[test]
fn trajectory_csv_round_trip() {
    let plant = ManipulatorSystem::by_name("cartpole").unwrap();
    let target = swing_up_target(&plant, &[1.0, 0.2], &SwingUpConfig {
        horizon: 30,
        ..Default::default()
    })
    .unwrap();
    let mut buf = Vec::new();
    write_trajectory_csv(&target, &mut buf).unwrap();
    let back = read_trajectory_csv(buf.as_slice()).unwrap();
    assert_eq!(back.len(), 30);
    assert!((back.dt - target.dt).abs() < 1e-12);
    assert_eq!(back.q, target.q);
    assert_eq!(back.qdd, target.qdd);
    assert_eq!(back.u, target.u);
}

#[test]
fn adaptive_state_equals_batch_ridge_on_realized_samples() {
    let plant = ManipulatorSystem::by_name("cartpole").unwrap();
    let phi = [1.5, 0.3];
    let target = swing_up_target(&plant, &phi, &SwingUpConfig {
        horizon: 120,
        ..Default::default()
    })
    .unwrap();
    let cfg = TrackingConfig::new(0.5, 0.5, target).unwrap();
    let dynamics = random_dynamics(true);
    let report = track_adaptive(&dynamics, &plant, |_| phi.to_vec(), &cfg, None).unwrap();
    let s = 100;
    // weights used at step s were estimated from samples 0..s
    let mut feats = DMatrix::zeros(s, 2);
    let mut rhs = DVector::zeros(s);
    for i in 0..s {
        let (v, c) = dynamics.features(&report.realized.state_input(i)).unwrap();
        feats.row_mut(i).copy_from_slice(&v);
        rhs[i] = report.realized.u[i] - c;
    }
    let batch = least_squares(&feats, &DMatrix::from_column_slice(s, 1, rhs.as_slice()), 1.0).unwrap();
    for j in 0..2 {
        assert!((report.weights[s][j] - batch.coef[(j, 0)]).abs() < 1e-8);
    }
    assert_eq!(report.weights[0], vec![0.0, 0.0]);
}

#[test]
fn zero_excitation_only_moves_along_the_constant_feature() {
    let plant = ManipulatorSystem::by_name("cartpole").unwrap();
    let cfg = TrackingConfig::new(0.5, 0.5, rest_target(vec![0.0, 0.0], 100)).unwrap();
    let dynamics = random_dynamics(false);
    let report = track_adaptive(&dynamics, &plant, |_| vec![1.0, 0.2], &cfg, None).unwrap();
    assert!(report.max_error() < 1e-12);
    let (v, _) = dynamics.features(&[0.0; 6]).unwrap();
    let w = report.weights.last().unwrap();
    // the change is parallel to v
    let cross = w[0] * v[1] - w[1] * v[0];
    assert!(cross.abs() < 1e-12);
    // orthogonal direction keeps its unit prior
    let cond = *report.information_condition.last().unwrap();
    let gram_top = 1.0 + 99.0 * (v[0] * v[0] + v[1] * v[1]);
    assert!((cond - gram_top).abs() < 1e-6 * gram_top);
}

#[test]
fn adaptive_report_logs_context_estimate() {
    let plant = ManipulatorSystem::by_name("cartpole").unwrap();
    let cfg = TrackingConfig::new(0.5, 0.5, rest_target(vec![0.0, 0.0], 10)).unwrap();
    let dynamics = random_dynamics(false);
    let weights = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
    let contexts = DMatrix::from_row_slice(3, 2, &[2.0, 0.0, 0.0, 3.0, 2.0, 3.0]);
    let map = crate::identification::fit_identification(&weights, &contexts, false).unwrap();
    let report = track_adaptive(&dynamics, &plant, |_| vec![1.0, 0.2], &cfg, Some(&map)).unwrap();
    assert_eq!(report.phi_hat.len(), 10);
    for (p, w) in report.phi_hat.iter().zip(&report.weights) {
        assert!((p[0] - 2.0 * w[0]).abs() < 1e-9 && (p[1] - 3.0 * w[1]).abs() < 1e-9);
    }
    let mut buf = Vec::new();
    report.write_csv(&cfg.target, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("step,q0,q1,q_target0,q_target1,u,u_hat,error,phi_hat0,phi_hat1"));
    assert_eq!(text.lines().count(), 11);
}

#[test]
fn shipped_swing_up_target_matches_regeneration() {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/targets/cartpole_swingup.csv");
    let shipped = load_trajectory(path).unwrap();
    let plant = ManipulatorSystem::by_name("cartpole").unwrap();
    let fresh = swing_up_target(&plant, &[1.5, 0.3], &SwingUpConfig::default()).unwrap();
    assert_eq!(shipped.len(), fresh.len());
    assert_eq!(shipped.q, fresh.q);
    assert_eq!(shipped.qd, fresh.qd);
    assert_eq!(shipped.qdd, fresh.qdd);
    assert_eq!(shipped.u, fresh.u);
    let peak = fresh.q.iter().map(|q| q[1].abs()).fold(0.0, f64::max);
    assert!(peak > 2.0, "pole never swings up: peak {peak}");
}
