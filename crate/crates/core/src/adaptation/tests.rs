use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::identification::fit_inverse;
use crate::nn::Architecture;

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
}

fn random_vector(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0))
}

/// Independent route: SVD pseudo-inverse.
fn svd_solution(a: &DMatrix<f64>, y: &DVector<f64>) -> DVector<f64> {
    a.clone().pseudo_inverse(1e-12).unwrap() * y
}

/// Independent route: Cholesky of `I + AᵀA` (unit-prior ridge).
fn unit_ridge(a: &DMatrix<f64>, y: &DVector<f64>) -> DVector<f64> {
    let g = DMatrix::<f64>::identity(a.ncols(), a.ncols()) + a.transpose() * a;
    g.cholesky().unwrap().solve(&(a.transpose() * y))
}

#[test]
fn identity_design_recovers_targets() {
    let a = DMatrix::<f64>::identity(3, 3);
    let y = DVector::from_column_slice(&[1.5, -2.0, 0.25]);
    let res = ols_from_features(&a, &y, 0.0).unwrap();
    assert_eq!(res.w.len(), 3);
    for i in 0..3 {
        assert!((res.w[i] - y[i]).abs() < 1e-14);
    }
    assert!(res.residual_mse < 1e-28);
    assert!((res.condition - 1.0).abs() < 1e-12);
}

#[test]
fn matches_pseudo_inverse_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..10 {
        let a = random_matrix(&mut rng, 40, 4);
        let y = random_vector(&mut rng, 40);
        let w = DVector::from_vec(ols_from_features(&a, &y, 0.0).unwrap().w);
        assert!((w - svd_solution(&a, &y)).amax() < 1e-8);
    }
}

#[test]
fn underdetermined_fit_has_minimum_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random_matrix(&mut rng, 2, 5);
    let y = random_vector(&mut rng, 2);
    let res = ols_from_features(&a, &y, 0.0).unwrap();
    assert!(res.condition.is_infinite());
    let w = DVector::from_vec(res.w);
    assert!((&a * &w - &y).amax() < 1e-10);
    // any null-space perturbation interpolates too but is longer
    let svd = a.clone().svd(false, true);
    let vt = svd.v_t.unwrap();
    let basis = DMatrix::<f64>::identity(5, 5) - vt.transpose() * &vt;
    for _ in 0..20 {
        let z = &basis * random_vector(&mut rng, 5);
        let alt = &w + z;
        assert!((&a * &alt - &y).amax() < 1e-10);
        assert!(alt.norm() >= w.norm() - 1e-12);
    }
}

#[test]
fn ridge_matches_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random_matrix(&mut rng, 12, 3);
    let y = random_vector(&mut rng, 12);
    let w = DVector::from_vec(ols_from_features(&a, &y, 1.0).unwrap().w);
    assert!((w - unit_ridge(&a, &y)).amax() < 1e-10);
}

#[test]
fn residual_is_non_increasing_on_nested_data() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = random_matrix(&mut rng, 30, 3);
    let y = random_vector(&mut rng, 30);
    // sum of squared residuals is monotone for nested prefixes; compare MSE·N
    let mut prev = 0.0;
    for n in 1..=30 {
        let res = ols_from_features(&a.rows(0, n).into_owned(), &y.rows(0, n).into_owned(), 0.0).unwrap();
        let sse = res.residual_mse * n as f64;
        assert!(sse >= prev - 1e-10, "n = {n}");
        prev = sse;
    }
}

#[test]
fn ols_adapt_subtracts_the_bias_head() {
    let arch = Architecture::tanh(vec![2, 8, 3], true).unwrap();
    let model = MetaModel::new(Variant::Camel, arch, 4, 5, 0.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let rows: Vec<Vec<f64>> = (0..20).map(|_| vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect();
    let w_true = [0.4, -1.3, 2.2];
    let y: Vec<f64> = rows.iter().map(|x| model.predict(&w_true, x).unwrap()).collect();
    let ds = TaskDataset::from_rows(&rows, &y, None).unwrap();
    let res = ols_adapt(&model, &ds, 0.0).unwrap();
    for (a, b) in res.w.iter().zip(&w_true) {
        assert!((a - b).abs() < 1e-8);
    }
    assert!(res.residual_mse < 1e-20);
}

#[test]
fn rls_ignores_zero_features() {
    let mut s = RlsState::with_weights(&[0.3, -0.2]);
    let before = s.clone();
    s.update(&[0.0, 0.0], 5.0).unwrap();
    assert_eq!(s.weights(), before.weights());
    assert_eq!(s.inverse_gram(), before.inverse_gram());
}

#[test]
fn rls_first_update_matches_formula() {
    let v = DVector::from_column_slice(&[1.0, 2.0, -0.5]);
    let u = 0.7;
    let s = rls_update(&RlsState::new(3), v.as_slice(), u).unwrap();
    let m1 = DMatrix::<f64>::identity(3, 3) - &v * v.transpose() / (1.0 + v.dot(&v));
    let w1 = &m1 * &v * u;
    assert!((s.inverse_gram() - &m1).amax() < 1e-15);
    assert!((DVector::from_column_slice(s.weights()) - w1).amax() < 1e-15);
    assert_eq!(s.count(), 1);
}

#[test]
fn rls_matches_batch_ridge_and_sherman_morrison() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..50 {
        let r = rng.gen_range(1..=8);
        let n = rng.gen_range(1..=200);
        let a = random_matrix(&mut rng, n, r) * 2.0;
        let y = random_vector(&mut rng, n) * 3.0;
        let mut s = RlsState::new(r);
        for i in 0..n {
            let v: Vec<f64> = a.row(i).iter().cloned().collect();
            s.update(&v, y[i]).unwrap();
        }
        s.check().unwrap();
        let batch = unit_ridge(&a, &y);
        assert!((DVector::from_column_slice(s.weights()) - batch).amax() < 1e-8);
        let info = DMatrix::<f64>::identity(r, r) + a.transpose() * &a;
        let m = info.try_inverse().unwrap();
        assert!((s.inverse_gram() - m).amax() < 1e-8);
    }
}

#[test]
fn zero_shot_reproduces_training_weights_on_linear_data() {
    let ctx = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 2.0, -1.0]);
    let a = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, -1.0, 0.5, 0.3, 0.0]);
    let bank = &ctx * a.transpose();
    let inv = fit_inverse(&ctx, &bank, false).unwrap();
    for t in 0..4 {
        let phi: Vec<f64> = ctx.row(t).iter().cloned().collect();
        let w = zero_shot_weights(&inv, &phi).unwrap();
        for k in 0..3 {
            assert!((w[k] - bank[(t, k)]).abs() < 1e-10);
        }
    }
    assert!(zero_shot_weights(&inv, &[0.0, 0.0]).unwrap().iter().all(|v| v.abs() < 1e-12));
    assert!(zero_shot_weights(&InverseContextMap::default(), &[1.0, 2.0]).is_err());
}

#[test]
fn gradient_adaptation_reduces_the_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let rows: Vec<Vec<f64>> = (0..15).map(|_| vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect();
    let y: Vec<f64> = rows.iter().map(|x| x[0] - 0.5 * x[1]).collect();
    let ds = TaskDataset::from_rows(&rows, &y, None).unwrap();
    for variant in [Variant::AnilFo, Variant::Coda] {
        let arch = Architecture::tanh(vec![2, 8, 3], true).unwrap();
        let model = MetaModel::new(variant, arch, 4, 8, 0.01).unwrap();
        let before = model.mse(&model.prior_weights(), &ds).unwrap();
        let cfg = GradientAdaptConfig {
            steps: 10,
            learning_rate: 0.01,
        };
        let res = gradient_adapt(&model, &ds, cfg).unwrap();
        assert!(res.residual_mse < before, "{variant:?}");
    }
}

#[test]
fn coda_adaptation_stays_on_its_affine_subspace() {
    let arch = Architecture::tanh(vec![1, 6, 3], false).unwrap();
    let mut model = MetaModel::new(Variant::Coda, arch, 4, 1, 0.0).unwrap();
    // rank-one hypernetwork: every adapted weight is w₀ + s·h
    let mut flat = model.task_flat();
    let h = [0.5, -1.0, 2.0];
    for k in 0..3 {
        for j in 0..3 {
            flat[3 + k * 3 + j] = if j == 0 { h[k] } else { 0.0 };
        }
    }
    model.set_task_flat(&flat).unwrap();
    let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64 / 10.0]).collect();
    let y: Vec<f64> = (0..10).map(|i| (i as f64).sin()).collect();
    let ds = TaskDataset::from_rows(&rows, &y, None).unwrap();
    let res = gradient_adapt(
        &model,
        &ds,
        GradientAdaptConfig {
            steps: 5,
            learning_rate: 0.05,
        },
    )
    .unwrap();
    let w0 = model.prior_weights();
    let d: Vec<f64> = res.w.iter().zip(&w0).map(|(a, b)| a - b).collect();
    let s = d[0] / h[0];
    for k in 0..3 {
        assert!((d[k] - s * h[k]).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn full_rank_fit_has_orthogonal_residual(seed in 0u64..10_000, n in 4usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_matrix(&mut rng, n, 3);
        let y = random_vector(&mut rng, n);
        let w = DVector::from_vec(ols_from_features(&a, &y, 0.0).unwrap().w);
        let g = a.transpose() * (&a * &w - &y);
        prop_assert!(g.amax() < 1e-9);
    }

    #[test]
    fn rls_is_order_invariant(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = rng.gen_range(1..=8);
        let n = rng.gen_range(2..=200);
        let a = random_matrix(&mut rng, n, r);
        let y = random_vector(&mut rng, n);
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let run = |idx: &[usize]| {
            let mut s = RlsState::new(r);
            for &i in idx {
                let v: Vec<f64> = a.row(i).iter().cloned().collect();
                s.update(&v, y[i]).unwrap();
            }
            DVector::from_column_slice(s.weights())
        };
        let forward: Vec<usize> = (0..n).collect();
        prop_assert!((run(&forward) - run(&order)).amax() < 1e-8);
    }
}
