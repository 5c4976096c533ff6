use super::{LinearSystem, PhysicalSystem};
use crate::error::{Error, Result};

/// Probes closer than this to a charge are rejected.
pub const MIN_PROBE_DISTANCE: f64 = 1e-3;

/// Point charges at fixed planar locations; the potential is
/// `y(x) = k Σ_j φ_j / ‖x − x_j‖`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChargeSystem {
    locations: Vec<[f64; 2]>,
    coulomb: f64,
}

impl ChargeSystem {
    pub fn new(locations: Vec<[f64; 2]>, coulomb: f64) -> Result<Self> {
        if locations.is_empty() {
            return Err(Error::config("charge system needs at least one charge"));
        }
        Ok(Self { locations, coulomb })
    }

    /// Three charges: one far to the left of the probe domain and two
    /// close to its lower edge.
    pub fn dipolar() -> Self {
        Self {
            locations: vec![[-2.5, 0.5], [-0.3, -0.3], [0.3, -0.3]],
            coulomb: 1.0,
        }
    }

    pub fn locations(&self) -> &[[f64; 2]] {
        &self.locations
    }

    /// Probe domain `[-1, 1] x [0, 1]`.
    pub fn domain() -> ([f64; 2], [f64; 2]) {
        ([-1.0, 0.0], [1.0, 1.0])
    }

    fn distances(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != 2 {
            return Err(Error::shape(format!("charge probes are 2-D, got {}", x.len())));
        }
        self.locations
            .iter()
            .map(|c| {
                let d = ((x[0] - c[0]).powi(2) + (x[1] - c[1]).powi(2)).sqrt();
                if d < MIN_PROBE_DISTANCE {
                    Err(Error::Singularity(format!(
                        "probe ({}, {}) lies within {MIN_PROBE_DISTANCE} of the charge at ({}, {})",
                        x[0], x[1], c[0], c[1]
                    )))
                } else {
                    Ok(d)
                }
            })
            .collect()
    }

    /// Analytic electric field `-∇y` at `x`.
    pub fn field(&self, context: &[f64], x: &[f64]) -> Result<[f64; 2]> {
        let d = self.distances(x)?;
        let mut e = [0.0; 2];
        for ((c, q), r) in self.locations.iter().zip(context).zip(&d) {
            let s = self.coulomb * q / r.powi(3);
            e[0] += s * (x[0] - c[0]);
            e[1] += s * (x[1] - c[1]);
        }
        Ok(e)
    }
}

impl PhysicalSystem for ChargeSystem {
    fn name(&self) -> &str {
        "charges"
    }

    fn context_dim(&self) -> usize {
        self.locations.len()
    }

    fn input_dim(&self) -> usize {
        2
    }

    fn evaluate(&self, context: &[f64], x: &[f64]) -> Result<f64> {
        if context.len() != self.locations.len() {
            return Err(Error::shape(format!(
                "expected {} charges, got {}",
                self.locations.len(),
                context.len()
            )));
        }
        let nu = self.basis(x)?;
        Ok(context.iter().zip(&nu).map(|(q, v)| q * v).sum())
    }
}

impl LinearSystem for ChargeSystem {
    fn offset(&self, _x: &[f64]) -> Result<f64> {
        Ok(0.0)
    }

    fn basis(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.distances(x)?.into_iter().map(|d| self.coulomb / d).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_charge_at_unit_distance() {
        let sys = ChargeSystem::new(vec![[0.0, 0.0]], 1.0).unwrap();
        assert_eq!(sys.evaluate(&[1.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert_eq!(sys.evaluate(&[1.0], &[0.6, 0.8]).unwrap(), 1.0);
    }

    #[test]
    fn symmetric_pair_at_midpoint() {
        let sys = ChargeSystem::new(vec![[-1.0, 0.0], [1.0, 0.0]], 1.0).unwrap();
        assert_eq!(sys.evaluate(&[1.0, 1.0], &[0.0, 0.0]).unwrap(), 2.0);
    }

    #[test]
    fn superposition() {
        let sys = ChargeSystem::dipolar();
        let x = [0.37, 0.61];
        let (a, b) = ([1.0, 4.0, 2.5], [3.0, -1.0, 0.5]);
        let sum: Vec<f64> = a.iter().zip(&b).map(|(p, q)| p + q).collect();
        let lhs = sys.evaluate(&sum, &x).unwrap();
        let rhs = sys.evaluate(&a, &x).unwrap() + sys.evaluate(&b, &x).unwrap();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn probe_on_charge_is_singular() {
        let sys = ChargeSystem::new(vec![[0.2, 0.2]], 1.0).unwrap();
        assert!(matches!(sys.evaluate(&[1.0], &[0.2, 0.2005]), Err(Error::Singularity(_))));
    }

    #[test]
    fn inverse_distance_limit_law() {
        // y · ‖x − x_j‖ → k φ_j near an isolated charge
        let sys = ChargeSystem::new(vec![[0.0, 0.0], [10.0, 0.0]], 1.0).unwrap();
        let phi = [2.0, 1.0];
        let ratio = |d: f64| sys.evaluate(&phi, &[d, 0.0]).unwrap() * d / phi[0];
        let (far, near) = (ratio(1e-2), ratio(1e-3));
        assert!((far - 1.0).abs() < 0.02);
        assert!((near - 1.0).abs() < 0.02);
        assert!((near - 1.0).abs() < (far - 1.0).abs());
    }

    #[test]
    fn field_matches_finite_difference_of_potential() {
        let sys = ChargeSystem::dipolar();
        let phi = [1.5, 3.0, 2.0];
        let x = [0.1, 0.4];
        let e = sys.field(&phi, &x).unwrap();
        let h = 1e-6;
        for i in 0..2 {
            let mut xp = x;
            xp[i] += h;
            let mut xm = x;
            xm[i] -= h;
            let fd = -(sys.evaluate(&phi, &xp).unwrap() - sys.evaluate(&phi, &xm).unwrap()) / (2.0 * h);
            assert!((fd - e[i]).abs() < 1e-6 * e[i].abs().max(1.0));
        }
    }
}
