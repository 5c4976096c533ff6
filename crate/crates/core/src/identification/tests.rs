use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
}

fn random_invertible(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    loop {
        let a = random_matrix(rng, n, n);
        if a.determinant().abs() > 0.1 {
            return a;
        }
    }
}

#[test]
fn identity_relation_gives_identity_map() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let phi = random_matrix(&mut rng, 6, 3);
    let map = fit_identification(&phi, &phi, false).unwrap();
    assert!((map.matrix() - DMatrix::<f64>::identity(3, 3)).amax() < 1e-10);
    assert!(map.fit.residual < 1e-12);
    assert_eq!(map.fit.samples, 6);
}

#[test]
fn linear_relation_is_inverted() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random_invertible(&mut rng, 3);
    let phi = random_matrix(&mut rng, 8, 3);
    let omega = &phi * a.transpose();
    let map = fit_identification(&omega, &phi, false).unwrap();
    let a_inv = a.clone().lu().try_inverse().unwrap();
    assert!((map.matrix() - a_inv).amax() < 1e-8);
}

#[test]
fn estimate_context_applies_the_map() {
    let phi = DMatrix::<f64>::identity(2, 2).insert_row(2, 1.0);
    let map = fit_identification(&phi, &phi, false).unwrap();
    let est = estimate_context(&map, &[2.0, 3.0]).unwrap();
    assert!((est[0] - 2.0).abs() < 1e-12 && (est[1] - 3.0).abs() < 1e-12);
    assert!(estimate_context(&map, &[0.0, 0.0]).unwrap().iter().all(|v| v.abs() < 1e-14));
    assert!(estimate_context(&IdentificationMap::default(), &[1.0, 1.0]).is_err());
    assert!(estimate_context(&map, &[1.0]).is_err());
}

#[test]
fn affine_fit_recovers_intercept() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let omega = random_matrix(&mut rng, 10, 3);
    let a = random_matrix(&mut rng, 2, 3);
    let b = [0.7, -1.1];
    let mut phi = &omega * a.transpose();
    for mut row in phi.row_iter_mut() {
        row[0] += b[0];
        row[1] += b[1];
    }
    let map = fit_identification(&omega, &phi, true).unwrap();
    let ic = map.fit.intercept.as_ref().unwrap();
    assert!((ic[0] - b[0]).abs() < 1e-10 && (ic[1] - b[1]).abs() < 1e-10);
    assert!((map.matrix() - a).amax() < 1e-10);
}

#[test]
fn round_trip_through_inverse_map() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let phi = random_matrix(&mut rng, 7, 2);
    let a = random_matrix(&mut rng, 3, 2);
    let omega = &phi * a.transpose();
    let id = fit_identification(&omega, &phi, false).unwrap();
    let inv = fit_inverse(&phi, &omega, false).unwrap();
    for t in 0..7 {
        let p: Vec<f64> = phi.row(t).iter().cloned().collect();
        let back = estimate_context(&id, &inv.fit.apply(&p).unwrap()).unwrap();
        assert!(relative_error(&back, &p) < 1e-6);
    }
}

#[test]
fn degenerate_contexts_fall_back_to_minimum_norm() {
    let phi = DMatrix::from_row_slice(4, 2, &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
    let omega = DMatrix::from_row_slice(4, 1, &[3.0, 3.0, 3.0, 3.0]);
    let inv = fit_inverse(&phi, &omega, false).unwrap();
    assert!(!inv.fit.well_posed);
    // minimum-norm solution lies along (1, 2)
    let w = inv.matrix();
    assert!((w[(0, 0)] * 2.0 - w[(0, 1)]).abs() < 1e-10);
    assert!((w[(0, 0)] + 2.0 * w[(0, 1)] - 3.0).abs() < 1e-10);
}

#[test]
fn direct_injection_gives_exact_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let phi = random_matrix(&mut rng, 6, 2);
    let nu = random_matrix(&mut rng, 30, 2);
    let d = PropositionDiagnostics::from_matrices(&phi, &phi, &nu, &nu).unwrap();
    assert!((d.p.clone() - DMatrix::<f64>::identity(2, 2)).amax() < 1e-10);
    assert!((d.q.clone() - DMatrix::<f64>::identity(2, 2)).amax() < 1e-10);
    assert!(d.identity_error < 1e-10);
    assert!(d.identified(1e-9));
}

#[test]
fn span_precondition_is_enforced() {
    let phi = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);
    let nu = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
    let err = PropositionDiagnostics::from_matrices(&phi, &phi, &nu, &nu).unwrap_err();
    assert!(matches!(err, Error::Precondition(_)));
}

/// `V W ᵀ = V' W'ᵀ` with `V = V' G`, `W' = W Gᵀ`: the lemma's maps must
/// satisfy `Q Pᵀ = I` exactly.
#[test]
fn lemma_construction_gives_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..20 {
        let r = rng.gen_range(1..=5);
        let (n, t) = (rng.gen_range(r..r + 20), rng.gen_range(r..r + 20));
        let v_prime = random_matrix(&mut rng, n, r);
        let w = random_matrix(&mut rng, t, r);
        let g = random_invertible(&mut rng, r);
        let v = &v_prime * &g;
        let w_prime = &w * g.transpose();
        assert!((&v * w.transpose() - &v_prime * w_prime.transpose()).amax() < 1e-12);
        let check = lemma_check(&v, &w, &v_prime, &w_prime).unwrap();
        assert!(check.identity_error < 1e-9, "{}", check.identity_error);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn predictions_are_gauge_invariant(seed in 0u64..100_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let omega = random_matrix(&mut rng, 9, 3);
        let phi = random_matrix(&mut rng, 9, 2);
        let a = random_invertible(&mut rng, 3);
        let map = fit_identification(&omega, &phi, false).unwrap();
        let moved = fit_identification(&(&omega * a.transpose()), &phi, false).unwrap();
        let a_inv = a.lu().try_inverse().unwrap();
        prop_assert!((moved.matrix() - map.matrix() * &a_inv).amax() < 1e-8);
        let w: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w_moved = (a_inv.clone().try_inverse().unwrap() * DVector::from_column_slice(&w)).iter().cloned().collect::<Vec<_>>();
        let p1 = estimate_context(&map, &w).unwrap();
        let p2 = estimate_context(&moved, &w_moved).unwrap();
        prop_assert!((p1[0] - p2[0]).abs() < 1e-8 && (p1[1] - p2[1]).abs() < 1e-8);
    }

    #[test]
    fn residual_is_orthogonal_to_weights(seed in 0u64..100_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let omega = random_matrix(&mut rng, 10, 3);
        let phi = random_matrix(&mut rng, 10, 2);
        let map = fit_identification(&omega, &phi, false).unwrap();
        let res = &omega * map.matrix().transpose() - &phi;
        prop_assert!((res.transpose() * &omega).amax() < 1e-9);
    }
}
