use super::*;

fn small() -> CapacitorGeometry {
    CapacitorGeometry {
        rows: 40,
        cols: 60,
        lower_row: 14.0,
        upper_row: 26.0,
        plate_start: 12.0,
        plate_end: 48.0,
        shift_scale: 4.0,
        ..CapacitorGeometry::default()
    }
}

#[test]
fn constant_boundary_without_electrodes_gives_uniform_field() {
    let g = small();
    let grid = solve_sor(&g, [0.0, 0.0], None).unwrap();
    // Rebuild a grid whose electrodes sit at zero potential: everything is zero.
    let zero = CapacitorGeometry {
        lower_potential: 0.0,
        upper_potential: 0.0,
        ..g
    };
    let z = solve_sor(&zero, [0.0, 0.0], Some(&grid.values)).unwrap();
    assert!(z.values.iter().all(|v| v.abs() <= 1e-6));
}

#[test]
fn solution_satisfies_cell_equations_and_max_principle() {
    let grid = solve_sor(&small(), [0.3, 0.2], None).unwrap();
    assert!(grid.max_residual() <= SOR_TOLERANCE);
    assert!(grid.satisfies_max_principle(1e-6));
    assert!(grid.values.iter().all(|v| (-1.0 - 1e-9..=1.0 + 1e-9).contains(v)));
}

#[test]
fn non_convergence_is_reported() {
    let err = solve_sor_with(&small(), [0.0, 0.0], None, SOR_OMEGA, SOR_TOLERANCE, 3).unwrap_err();
    assert!(matches!(err, Error::Solver { iterations: 3, .. }));
}

#[test]
fn perturbation_out_of_box_is_rejected() {
    let p = CapacitorProblem::new(small(), 1.0).unwrap();
    assert!(p.solve(0.5, [0.9, 0.0]).is_err());
    assert!(p.solve(1.5, [0.1, 0.0]).is_err());
    assert!(CapacitorProblem::new(small(), -0.1).is_err());
}

#[test]
fn solution_is_continuous_in_the_plate_pose() {
    let g = small();
    let a = solve_sor(&g, [0.1, 0.1], None).unwrap();
    let b = solve_sor(&g, [0.1005, 0.1], None).unwrap();
    let diff = a.values.iter().zip(&b.values).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(diff > 0.0 && diff < 0.05, "{diff}");
}

#[test]
fn bilinear_sampling_hits_cell_values() {
    let grid = solve_sor(&small(), [0.0, 0.0], None).unwrap();
    let v = grid.sample(30.0 / CELLS_PER_UNIT, 20.0 / CELLS_PER_UNIT).unwrap();
    assert!((v - grid.get(20, 30)).abs() < 1e-12);
    let mid = grid.sample(30.5 / CELLS_PER_UNIT, 20.0 / CELLS_PER_UNIT).unwrap();
    assert!((mid - 0.5 * (grid.get(20, 30) + grid.get(20, 31))).abs() < 1e-12);
    assert!(grid.sample(-0.1, 0.0).is_err());
}

#[test]
fn csv_has_one_line_per_row() {
    let grid = solve_sor(&small(), [0.0, 0.0], None).unwrap();
    let csv = grid.to_csv();
    assert_eq!(csv.lines().count(), 40);
    assert_eq!(csv.lines().next().unwrap().split(',').count(), 60);
}
