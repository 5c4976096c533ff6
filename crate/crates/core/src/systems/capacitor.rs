//! Misaligned parallel-plate capacitor: Laplace's equation on a grounded
//! rectangular box with two thin electrodes, solved by successive
//! over-relaxation.
//!
//! Electrodes are line segments with a sub-cell coverage weight `β ∈ [0,1]`
//! per cell (`β = 1` within half a cell of the segment, falling linearly to
//! `0` at one cell). A cell solves `V = (1 − β)·avg(neighbours) + β·V_plate`,
//! which keeps the discrete solution continuous in the plate pose and
//! preserves the discrete maximum principle.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Mutex;

use super::PhysicalSystem;
use crate::error::{Error, Result};

pub const SOR_OMEGA: f64 = 1.9;
pub const SOR_TOLERANCE: f64 = 1e-6;
pub const SOR_MAX_ITERATIONS: usize = 50_000;

/// Cell length in input-space units: `x = column / 100`, `y = row / 100`.
pub const CELLS_PER_UNIT: f64 = 100.0;

/// Electrode layout in cell coordinates (row = vertical, column = horizontal).
#[derive(Debug, Clone, PartialEq)]
pub struct CapacitorGeometry {
    pub rows: usize,
    pub cols: usize,
    pub lower_row: f64,
    pub upper_row: f64,
    pub plate_start: f64,
    pub plate_end: f64,
    pub lower_potential: f64,
    pub upper_potential: f64,
    /// Vertical displacement of the upper plate, in cells, per unit of `η`.
    pub shift_scale: f64,
}

impl Default for CapacitorGeometry {
    fn default() -> Self {
        Self {
            rows: 200,
            cols: 300,
            lower_row: 70.0,
            upper_row: 130.0,
            plate_start: 60.0,
            plate_end: 240.0,
            lower_potential: -1.0,
            upper_potential: 1.0,
            shift_scale: 20.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Segment {
    a: (f64, f64),
    b: (f64, f64),
    potential: f64,
}

impl Segment {
    /// Distance from `(row, col)` to the segment, in cells.
    fn distance(&self, p: (f64, f64)) -> f64 {
        let (dr, dc) = (self.b.0 - self.a.0, self.b.1 - self.a.1);
        let len2 = dr * dr + dc * dc;
        let t = if len2 == 0.0 {
            0.0
        } else {
            (((p.0 - self.a.0) * dr + (p.1 - self.a.1) * dc) / len2).clamp(0.0, 1.0)
        };
        let (qr, qc) = (self.a.0 + t * dr, self.a.1 + t * dc);
        ((p.0 - qr).powi(2) + (p.1 - qc).powi(2)).sqrt()
    }
}

fn coverage(d: f64) -> f64 {
    (2.0 * (1.0 - d)).clamp(0.0, 1.0)
}

impl CapacitorGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.rows < 3 || self.cols < 3 {
            return Err(Error::config("capacitor grid must be at least 3×3"));
        }
        let inside_r = |r: f64| r >= 2.0 && r <= self.rows as f64 - 3.0;
        let inside_c = |c: f64| c >= 2.0 && c <= self.cols as f64 - 3.0;
        if !(inside_r(self.lower_row) && inside_r(self.upper_row) && inside_c(self.plate_start) && inside_c(self.plate_end))
        {
            return Err(Error::config("electrodes must lie inside the grid"));
        }
        if self.plate_end <= self.plate_start || self.upper_row <= self.lower_row {
            return Err(Error::config("plates must have positive length and the upper plate must be above"));
        }
        Ok(())
    }

    /// Electrode segments for a perturbation `δ = (angle, shift)` applied
    /// to the upper plate about its centre.
    fn segments(&self, delta: [f64; 2]) -> Result<[Segment; 2]> {
        let half = 0.5 * (self.plate_end - self.plate_start);
        let centre = (
            self.upper_row + self.shift_scale * delta[1],
            0.5 * (self.plate_start + self.plate_end),
        );
        let (s, c) = delta[0].sin_cos();
        let upper = Segment {
            a: (centre.0 - half * s, centre.1 - half * c),
            b: (centre.0 + half * s, centre.1 + half * c),
            potential: self.upper_potential,
        };
        let lower = Segment {
            a: (self.lower_row, self.plate_start),
            b: (self.lower_row, self.plate_end),
            potential: self.lower_potential,
        };
        for p in [upper.a, upper.b] {
            if p.0 < 2.0 || p.0 > self.rows as f64 - 3.0 || p.1 < 2.0 || p.1 > self.cols as f64 - 3.0 {
                return Err(Error::Precondition(format!("perturbed electrode leaves the grid at {p:?}")));
            }
        }
        if upper.a.0.min(upper.b.0) <= self.lower_row + 1.0 {
            return Err(Error::Precondition("perturbed plates touch".into()));
        }
        Ok([lower, upper])
    }
}

/// Solved potential on the cell grid, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialGrid {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
    /// Electrode coverage per cell; `1` means pinned.
    pub coverage: Vec<f64>,
    /// Electrode potential per cell, meaningful where coverage is positive.
    pub plate: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
}

impl PotentialGrid {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    fn idx(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }

    pub fn is_boundary(&self, row: usize, col: usize) -> bool {
        row == 0 || col == 0 || row + 1 == self.rows || col + 1 == self.cols
    }

    /// Cell-equation residual scaled like the 5-point Laplacian:
    /// `4·((1 − β)·avg + β·V_plate − V)`, zero on pinned and boundary cells.
    pub fn residual_at(&self, row: usize, col: usize) -> f64 {
        if self.is_boundary(row, col) {
            return 0.0;
        }
        let k = self.idx(row, col);
        let beta = self.coverage[k];
        if beta >= 1.0 {
            return 0.0;
        }
        let sum = self.values[k - 1] + self.values[k + 1] + self.values[k - self.cols] + self.values[k + self.cols];
        4.0 * ((1.0 - beta) * 0.25 * sum + beta * self.plate[k] - self.values[k])
    }

    pub fn max_residual(&self) -> f64 {
        max_residual(self.rows, self.cols, &self.values, &self.coverage, &self.plate)
    }

    /// Whether every free cell lies within the range of its neighbours and
    /// (for partially covered cells) its electrode potential, to `slack`.
    pub fn satisfies_max_principle(&self, slack: f64) -> bool {
        for r in 1..self.rows - 1 {
            for c in 1..self.cols - 1 {
                let k = self.idx(r, c);
                let beta = self.coverage[k];
                if beta >= 1.0 {
                    continue;
                }
                let nb = [self.values[k - 1], self.values[k + 1], self.values[k - self.cols], self.values[k + self.cols]];
                let mut lo = nb.iter().cloned().fold(f64::INFINITY, f64::min);
                let mut hi = nb.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                if beta > 0.0 {
                    lo = lo.min(self.plate[k]);
                    hi = hi.max(self.plate[k]);
                }
                let v = self.values[k];
                if v < lo - slack || v > hi + slack {
                    return false;
                }
            }
        }
        true
    }

    /// Bilinear interpolation at input-space point `(x, y)`.
    pub fn sample(&self, x: f64, y: f64) -> Result<f64> {
        let (c, r) = (x * CELLS_PER_UNIT, y * CELLS_PER_UNIT);
        let (cmax, rmax) = ((self.cols - 1) as f64, (self.rows - 1) as f64);
        if !(0.0..=cmax).contains(&c) || !(0.0..=rmax).contains(&r) {
            return Err(Error::Precondition(format!("probe ({x}, {y}) is outside the grid")));
        }
        let (c0, r0) = ((c.floor() as usize).min(self.cols - 2), (r.floor() as usize).min(self.rows - 2));
        let (fc, fr) = (c - c0 as f64, r - r0 as f64);
        let v = (1.0 - fr) * ((1.0 - fc) * self.get(r0, c0) + fc * self.get(r0, c0 + 1))
            + fr * ((1.0 - fc) * self.get(r0 + 1, c0) + fc * self.get(r0 + 1, c0 + 1));
        Ok(v)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::with_capacity(self.values.len() * 12);
        for r in 0..self.rows {
            for c in 0..self.cols {
                if c > 0 {
                    s.push(',');
                }
                let _ = write!(s, "{:.9}", self.get(r, c));
            }
            s.push('\n');
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Potential grid for the capacitor family at a fixed misalignment scale.
#[derive(Debug)]
pub struct CapacitorProblem {
    pub geometry: CapacitorGeometry,
    pub epsilon: f64,
    base: Mutex<Option<Vec<f64>>>,
    last: Mutex<Option<([u64; 2], PotentialGrid)>>,
}

/// Declared box of the misalignment `φ = (α, η)`.
pub const ANGLE_RANGE: (f64, f64) = (0.0, 0.5);
pub const SHIFT_RANGE: (f64, f64) = (-0.5, 0.5);

impl Clone for CapacitorProblem {
    fn clone(&self) -> Self {
        Self {
            geometry: self.geometry.clone(),
            epsilon: self.epsilon,
            base: Mutex::new(self.base.lock().unwrap().clone()),
            last: Mutex::new(None),
        }
    }
}

impl CapacitorProblem {
    pub fn new(geometry: CapacitorGeometry, epsilon: f64) -> Result<Self> {
        geometry.validate()?;
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(Error::config(format!("misalignment scale {epsilon} outside [0, 1]")));
        }
        Ok(Self {
            geometry,
            epsilon,
            base: Mutex::new(None),
            last: Mutex::new(None),
        })
    }

    /// Solves for the misalignment `φ` scaled by `ε`.
    pub fn solve(&self, epsilon: f64, phi: [f64; 2]) -> Result<PotentialGrid> {
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(Error::Precondition(format!("misalignment scale {epsilon} outside [0, 1]")));
        }
        let in_box = |v: f64, (lo, hi): (f64, f64)| (lo - 1e-12..=hi + 1e-12).contains(&v);
        if !in_box(phi[0], ANGLE_RANGE) || !in_box(phi[1], SHIFT_RANGE) {
            return Err(Error::Precondition(format!("misalignment {phi:?} outside the declared box")));
        }
        self.solve_delta([epsilon * phi[0], epsilon * phi[1]])
    }

    /// Solves for an already-scaled perturbation `δ = ε·φ`, warm-starting
    /// from the aligned solution.
    pub fn solve_delta(&self, delta: [f64; 2]) -> Result<PotentialGrid> {
        let base = {
            let mut guard = self.base.lock().unwrap();
            if guard.is_none() {
                let g = solve_sor(&self.geometry, [0.0, 0.0], None)?;
                *guard = Some(g.values);
            }
            guard.clone()
        };
        solve_sor(&self.geometry, delta, base.as_deref())
    }

    /// Samples the solution for `delta`, re-solving only when `delta`
    /// differs from the previous call.
    fn sample_cached(&self, delta: [f64; 2], x: f64, y: f64) -> Result<f64> {
        let key = [delta[0].to_bits(), delta[1].to_bits()];
        let mut guard = self.last.lock().unwrap();
        match guard.as_ref() {
            Some((k, g)) if *k == key => g.sample(x, y),
            _ => {
                let g = self.solve_delta(delta)?;
                let v = g.sample(x, y);
                *guard = Some((key, g));
                v
            }
        }
    }
}

impl PhysicalSystem for CapacitorProblem {
    fn name(&self) -> &str {
        "capacitor"
    }
    fn context_dim(&self) -> usize {
        2
    }
    fn input_dim(&self) -> usize {
        2
    }
    /// `context` is the scaled misalignment `ε·(α, η)`.
    fn evaluate(&self, context: &[f64], x: &[f64]) -> Result<f64> {
        if context.len() != 2 || x.len() != 2 {
            return Err(Error::shape("capacitor expects 2-D context and probe"));
        }
        self.sample_cached([context[0], context[1]], x[0], x[1])
    }
}

fn max_residual(rows: usize, cols: usize, v: &[f64], coverage: &[f64], plate: &[f64]) -> f64 {
    let mut m: f64 = 0.0;
    for r in 1..rows - 1 {
        for c in 1..cols - 1 {
            let k = r * cols + c;
            let beta = coverage[k];
            if beta >= 1.0 {
                continue;
            }
            let avg = 0.25 * (v[k - 1] + v[k + 1] + v[k - cols] + v[k + cols]);
            m = m.max((4.0 * ((1.0 - beta) * avg + beta * plate[k] - v[k])).abs());
        }
    }
    m
}

/// SOR sweep until the max cell residual is below [`SOR_TOLERANCE`].
pub fn solve_sor(geometry: &CapacitorGeometry, delta: [f64; 2], warm: Option<&[f64]>) -> Result<PotentialGrid> {
    solve_sor_with(geometry, delta, warm, SOR_OMEGA, SOR_TOLERANCE, SOR_MAX_ITERATIONS)
}

pub fn solve_sor_with(
    geometry: &CapacitorGeometry,
    delta: [f64; 2],
    warm: Option<&[f64]>,
    omega: f64,
    tolerance: f64,
    max_iterations: usize,
) -> Result<PotentialGrid> {
    geometry.validate()?;
    let (rows, cols) = (geometry.rows, geometry.cols);
    let n = rows * cols;
    let mut coverage_v = vec![0.0; n];
    let mut plate = vec![0.0; n];
    for seg in geometry.segments(delta)? {
        for r in 1..rows - 1 {
            for c in 1..cols - 1 {
                let beta = coverage(seg.distance((r as f64, c as f64)));
                let k = r * cols + c;
                if beta > coverage_v[k] {
                    coverage_v[k] = beta;
                    plate[k] = seg.potential;
                }
            }
        }
    }
    let mut v = match warm {
        Some(w) if w.len() == n => w.to_vec(),
        Some(_) => return Err(Error::shape("warm start has wrong size")),
        None => vec![0.0; n],
    };
    for k in 0..n {
        let (r, c) = (k / cols, k % cols);
        if r == 0 || c == 0 || r + 1 == rows || c + 1 == cols {
            v[k] = 0.0;
        } else if coverage_v[k] >= 1.0 {
            v[k] = plate[k];
        }
    }
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    while iterations < max_iterations {
        iterations += 1;
        residual = 0.0;
        for r in 1..rows - 1 {
            let base = r * cols;
            for c in 1..cols - 1 {
                let k = base + c;
                let beta = coverage_v[k];
                if beta >= 1.0 {
                    continue;
                }
                let avg = 0.25 * (v[k - 1] + v[k + 1] + v[k - cols] + v[k + cols]);
                let target = if beta > 0.0 { (1.0 - beta) * avg + beta * plate[k] } else { avg };
                let d = target - v[k];
                residual = f64::max(residual, (4.0 * d).abs());
                v[k] += omega * d;
            }
        }
        if !residual.is_finite() {
            return Err(Error::Solver { iterations, residual });
        }
        // the in-sweep residual lags the updates, so confirm on the final grid
        if residual <= tolerance {
            residual = max_residual(rows, cols, &v, &coverage_v, &plate);
            if residual <= tolerance {
                break;
            }
        }
    }
    if residual > tolerance {
        return Err(Error::Solver { iterations, residual });
    }
    Ok(PotentialGrid {
        rows,
        cols,
        values: v,
        coverage: coverage_v,
        plate,
        iterations,
        residual,
    })
}

#[cfg(test)]
mod tests;
