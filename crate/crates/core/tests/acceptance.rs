//! End-to-end acceptance run: one line per criterion, non-zero exit if any fails.
//!
//! Heavy criteria train models from the shipped configs, so this target
//! takes several minutes even with optimizations.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use camel::adaptation::RlsState;
use camel::experiment::{
    evaluate_experiment, fit_context_maps, generate, load_or_train, run_bench, run_control, run_prop_check, run_sweep,
    Environment, ExperimentConfig, ExperimentOutcome,
};
use camel::identification::lemma_check;
use camel::meta::{MetaDataset, MetaModel, RegConfig, TaskDataset, Variant};
use camel::nn::{Activation, Architecture};
use camel::systems::capacitor::solve_sor;
use camel::systems::{CapacitorGeometry, Manipulator, ManipulatorSystem};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn config(name: &str) -> ExperimentConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

/// Charges run shared by the identification, adaptation, zero-shot and timing criteria.
fn charges() -> (ExperimentConfig, ExperimentOutcome) {
    let mut cfg = config("charges.toml");
    cfg.model.variants = vec!["camel".into(), "anil".into()];
    let out = evaluate_experiment(&cfg, None).expect("charges pipeline");
    (cfg, out)
}

fn charges_identification(out: &ExperimentOutcome) -> Outcome {
    let id = out.record("CAMEL").unwrap().identification.unwrap();
    outcome(
        id.mean <= 0.02,
        format!("mean relative error {:.3}% over {} environments (limit 2%)", 100.0 * id.mean, out.record("CAMEL").unwrap().trials),
    )
}

fn charges_adaptation(out: &ExperimentOutcome) -> Outcome {
    let r = out.record("CAMEL").unwrap();
    let at = |k: usize| r.mse.iter().find(|(s, _)| *s == k).unwrap().1;
    let (m3, m10) = (at(3), at(10));
    outcome(
        m10.mean <= 1e-3 && m3.mean <= 1e-2,
        format!(
            "10-shot MSE {:.2e} ± {:.1e} (limit 1e-3), 3-shot {:.2e} ± {:.1e} (limit 1e-2)",
            m10.mean, m10.std, m3.mean, m3.std
        ),
    )
}

fn charges_zero_shot(out: &ExperimentOutcome) -> Outcome {
    let z = out.record("phi-CAMEL").unwrap().mse[0].1;
    outcome(z.mean <= 1e-2, format!("zero-shot MSE {:.2e} ± {:.1e} (limit 1e-2)", z.mean, z.std))
}

fn proposition() -> Outcome {
    let t = Instant::now();
    let d = run_prop_check(&config("prop_check.toml"), None).expect("prop-check");
    let loss = d.meta_loss.unwrap();
    outcome(
        loss <= 1e-8 && d.p_residual <= 1e-2 && d.q_residual <= 1e-2 && d.identity_error <= 1e-2,
        format!(
            "meta-loss {loss:.1e}, P residual {:.1e}, Q residual {:.1e}, |QP^T - I| {:.1e} in {:.0}s",
            d.p_residual,
            d.q_residual,
            d.identity_error,
            t.elapsed().as_secs_f64()
        ),
    )
}

fn lemma() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let r = rng.gen_range(1..=6);
        let (n, t) = (rng.gen_range(r..r + 30), rng.gen_range(r..r + 30));
        let v_prime = random_matrix(&mut rng, n, r);
        let w = random_matrix(&mut rng, t, r);
        let mut g = random_matrix(&mut rng, r, r);
        for i in 0..r {
            g[(i, i)] += 3.0;
        }
        let v = &v_prime * &g;
        let w_prime = &w * g.transpose();
        let check = lemma_check(&v, &w, &v_prime, &w_prime).expect("full-rank construction");
        worst = worst.max(check.identity_error);
    }
    outcome(worst <= 1e-9, format!("worst |QP^T - I| {worst:.1e} over 20 constructions (limit 1e-9)"))
}

fn rls_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let (mut batch_gap, mut perm_gap): (f64, f64) = (0.0, 0.0);
    for _ in 0..50 {
        let r = rng.gen_range(1..=8);
        let n = rng.gen_range(1..=200);
        let v = random_matrix(&mut rng, n, r);
        let u = DVector::from_fn(n, |_, _| rng.gen_range(-2.0..2.0));
        let mut rls = RlsState::new(r);
        for i in 0..n {
            let row: Vec<f64> = v.row(i).iter().copied().collect();
            rls.update(&row, u[i]).unwrap();
        }
        let gram = DMatrix::identity(r, r) + v.transpose() * &v;
        let batch = gram.lu().solve(&(v.transpose() * &u)).unwrap();
        let scale = batch.amax().max(1.0);
        let got = DVector::from_column_slice(rls.weights());
        batch_gap = batch_gap.max((&got - &batch).amax() / scale);

        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut shuffled = RlsState::new(r);
        for &i in &order {
            let row: Vec<f64> = v.row(i).iter().copied().collect();
            shuffled.update(&row, u[i]).unwrap();
        }
        let other = DVector::from_column_slice(shuffled.weights());
        perm_gap = perm_gap.max((&got - &other).amax() / scale);
    }
    outcome(
        batch_gap <= 1e-8 && perm_gap <= 1e-8,
        format!("max gap to batch ridge {batch_gap:.1e}, to permuted stream {perm_gap:.1e} (limit 1e-8)"),
    )
}

fn gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let mut worst: f64 = 0.0;
    for case in 0..20 {
        let variant = [Variant::Camel, Variant::Coda, Variant::AnilFo][case % 3];
        let shared = case % 2 == 0;
        let d = rng.gen_range(1..=3);
        let depth = rng.gen_range(1..=3);
        let mut layers = vec![d];
        layers.extend((0..depth).map(|_| rng.gen_range(2..=6)));
        let r = rng.gen_range(1..=3);
        let bias_head = rng.gen_bool(0.5);
        layers.push(r + bias_head as usize);
        let tasks = rng.gen_range(r + 1..=r + 3);
        let n = rng.gen_range(3..=8);
        let grid: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let ts = (0..tasks)
            .map(|_| {
                let rows: Vec<Vec<f64>> = if shared {
                    grid.clone()
                } else {
                    (0..n).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
                };
                let y: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
                TaskDataset::from_rows(&rows, &y, Some(vec![rng.gen_range(-1.0..1.0)])).unwrap()
            })
            .collect();
        let meta = MetaDataset::new(ts, shared).unwrap();
        let arch = Architecture::new(layers, Activation::Tanh, bias_head).unwrap();
        // a zero inner step makes the first-order head update exact
        let mut model = MetaModel::new(variant, arch, tasks, case as u64, 0.0).unwrap();
        let flat: Vec<f64> = model.task_flat().iter().map(|_| rng.gen_range(-0.8..0.8)).collect();
        model.set_task_flat(&flat).unwrap();
        let reg = RegConfig {
            lambda: rng.gen_range(0.0..0.1),
        };
        let g = model.meta_gradient(&meta, reg).unwrap();
        let h = 1e-6;
        let mut analytic = g.net.clone();
        analytic.extend(&g.task);
        let mut numeric = Vec::with_capacity(analytic.len());
        for i in 0..model.net().len() {
            let mut m = model.clone();
            m.net_mut().flat_mut()[i] += h;
            let up = m.meta_loss(&meta, reg).unwrap();
            m.net_mut().flat_mut()[i] -= 2.0 * h;
            let down = m.meta_loss(&meta, reg).unwrap();
            numeric.push((up - down) / (2.0 * h));
        }
        for i in 0..flat.len() {
            let mut m = model.clone();
            let mut p = flat.clone();
            p[i] += h;
            m.set_task_flat(&p).unwrap();
            let up = m.meta_loss(&meta, reg).unwrap();
            p[i] -= 2.0 * h;
            m.set_task_flat(&p).unwrap();
            let down = m.meta_loss(&meta, reg).unwrap();
            numeric.push((up - down) / (2.0 * h));
        }
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = numeric.iter().map(|b| b * b).sum::<f64>().sqrt();
        worst = worst.max(diff / norm.max(1e-12));
    }
    outcome(worst <= 1e-5, format!("worst relative error {worst:.1e} over 20 configurations (limit 1e-5)"))
}

fn capacitor() -> (Outcome, Outcome) {
    // ideal plates: linear mid-gap profile between the electrodes
    let g = CapacitorGeometry::default();
    let grid = solve_sor(&g, [0.0, 0.0], None).expect("ideal capacitor");
    let col = ((g.plate_start + g.plate_end) / 2.0).round() as usize;
    let (lo, hi) = (g.lower_row as usize, g.upper_row as usize);
    let span = g.upper_potential - g.lower_potential;
    let mut worst: f64 = 0.0;
    for row in lo + 5..=hi - 5 {
        let exact = g.lower_potential + span * (row - lo) as f64 / (hi - lo) as f64;
        worst = worst.max((grid.get(row, col) - exact).abs() / span);
    }
    let mut principle = grid.satisfies_max_principle(1e-6);
    for delta in [[0.05, 0.0], [0.0, 0.05], [0.4, -0.5], [0.5, 0.5]] {
        principle &= solve_sor(&g, delta, Some(&grid.values)).unwrap().satisfies_max_principle(1e-6);
    }

    let mut cfg = config("capacitor.toml");
    cfg.sweep.as_mut().unwrap().epsilon = vec![0.1, 1.0];
    let dir = tempfile::tempdir().unwrap();
    let rows = run_sweep(&cfg, Some(dir.path())).expect("capacitor sweep");
    let emitted = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap().lines().count() == 4;
    let (small, full) = (&rows[0], &rows[1]);
    let physics = outcome(
        worst <= 0.01 && principle && emitted && small.identification.mean < full.identification.mean,
        format!(
            "mid-gap deviation {:.2}% of the plate voltage (limit 1%), max principle {}, identification error {:.3} at eps = 0.1 vs {:.3} at eps = 1",
            100.0 * worst,
            if principle { "holds" } else { "violated" },
            small.identification.mean,
            full.identification.mean
        ),
    );
    let m30 = small.mse.iter().find(|(k, _)| *k == 30).unwrap().1;
    let adaptation = outcome(m30.mean <= 1e-3, format!("30-shot MSE {:.2e} ± {:.1e} at eps = 0.1 (limit 1e-3)", m30.mean, m30.std));
    (physics, adaptation)
}

fn cartpole() -> Outcome {
    let t = Instant::now();
    let cfg = config("cartpole.toml");
    let env = Environment::build(&cfg).unwrap();
    let g = generate(&cfg, &env).unwrap();
    let models = load_or_train(&cfg, &g.data, None).unwrap();
    let maps = fit_context_maps(&models[0], &g.data, &g.contexts, cfg.identification.affine).unwrap();
    let out = run_control(&cfg, &models[0], &maps, None).expect("control run");
    let fixed = out.fixed.as_ref().map_or(String::new(), |(l, a)| {
        format!("; fixed tracking learned {:.3} vs friction-free analytic {:.3}", l.rms_error(), a.rms_error())
    });
    let s = out.summary;
    outcome(
        s.error_recovered() && s.switched_error <= 0.1,
        format!(
            "pre-switch error {:.3}, end of window {:.3} (limit {:.3}); cart mass {:.3} vs {:.3} ({:.0}% off, limit 10%){fixed} in {:.0}s",
            s.pre_error,
            s.post_error,
            2.0 * s.pre_error,
            s.phi_hat[0],
            s.phi_true[0],
            100.0 * s.switched_error,
            t.elapsed().as_secs_f64()
        ),
    )
}

fn speed(cfg: &ExperimentConfig, out: &ExperimentOutcome) -> Outcome {
    let r = run_bench(cfg, &out.models, None).expect("bench");
    outcome(
        r.ratio() >= 3.0,
        format!(
            "gradient / closed-form median time {:.1}x over {} repetitions (limit 3x)",
            r.ratio(),
            r.repetitions
        ),
    )
}

fn round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let mut worst: f64 = 0.0;
    for name in ["pendulum", "cartpole", "arm"] {
        let sys = ManipulatorSystem::by_name(name).unwrap();
        let d = sys.dof();
        for _ in 0..5 {
            let phi = [rng.gen_range(0.5..2.0), rng.gen_range(0.2..1.0)];
            let (a, p) = (rng.gen_range(1.0..8.0), rng.gen_range(0.5..2.0));
            let q0: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let traj = sys
                .simulate(&phi, |s, _, _| a * (std::f64::consts::TAU * s as f64 * 0.01 / p).sin(), 0.01, 200, &q0, &vec![0.0; d])
                .unwrap();
            for s in 0..traj.len() {
                let u = sys.inverse_dynamics(&phi, &traj.q[s], &traj.qd[s], &traj.qdd[s]).unwrap();
                worst = worst.max((u - traj.u[s]).abs());
            }
        }
    }
    let pendulum = ManipulatorSystem::by_name("pendulum").unwrap().with_friction(0.0);
    let phi = [1.0, 1.0];
    let traj = pendulum.simulate(&phi, |_, _, _| 0.0, 0.01, 200, &[1.2], &[0.0]).unwrap();
    let e0 = pendulum.energy(&phi, &traj.q[0], &traj.qd[0]);
    let last = traj.len() - 1;
    let drift = (pendulum.energy(&phi, &traj.q[last], &traj.qd[last]) - e0).abs() / e0.abs();
    outcome(
        worst <= 1e-6 && drift <= 1e-5,
        format!("max actuation error {worst:.1e} (limit 1e-6), energy drift {drift:.1e} (limit 1e-5)"),
    )
}

fn main() -> ExitCode {
    let start = Instant::now();
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut report = |n: usize, name: &'static str, o: Outcome| {
        println!("{} criterion {n:>2} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, name, o));
    };
    report(5, "lemma construction", lemma());
    report(6, "recursive least squares = batch ridge", rls_oracle());
    report(7, "gradient correctness", gradients());
    report(12, "inverse-dynamics round trip", round_trip());
    report(4, "identifiability on a linear system", proposition());
    let (charges_cfg, charges_out) = charges();
    report(1, "charges identification", charges_identification(&charges_out));
    report(2, "charges few-shot adaptation", charges_adaptation(&charges_out));
    report(3, "charges zero-shot", charges_zero_shot(&charges_out));
    report(11, "adaptation speed", speed(&charges_cfg, &charges_out));
    let (physics, adaptation) = capacitor();
    report(8, "capacitor physics and sweep", physics);
    report(9, "capacitor adaptation", adaptation);
    report(10, "cartpole adaptive control", cartpole());

    let failed: Vec<usize> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!(
        "{} of {} criteria passed in {:.0}s",
        results.len() - failed.len(),
        results.len(),
        start.elapsed().as_secs_f64()
    );
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failed: {failed:?}");
        ExitCode::FAILURE
    }
}
