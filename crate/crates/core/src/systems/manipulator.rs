//! Rigid-body manipulators `M(q) q̈ + C(q, q̇) q̇ + g(q) + F q̇ = B u` with a
//! single actuated coordinate and viscous joint friction `F = diag(b)`.
//!
//! Every system here is linear in its context `φ` (two inertial
//! parameters), so the inverse dynamics `(q, q̇, q̈) ↦ u` has the form
//! `κ(x) + φᵀ ν(x)` with the friction force inside `κ`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::dataset::add_noise;
use super::{LinearSystem, PhysicalSystem};
use crate::error::{Error, Result};
use crate::meta::{MetaDataset, TaskDataset};

pub const GRAVITY: f64 = 9.81;

/// State norm beyond which a simulation is declared unstable.
pub const BLOWUP_NORM: f64 = 1e6;

pub trait Manipulator {
    fn name(&self) -> &str;
    /// Number of generalized coordinates.
    fn dof(&self) -> usize;
    /// Index of the actuated coordinate (`B = e_k`).
    fn actuated(&self) -> usize;
    fn mass_matrix(&self, phi: &[f64], q: &[f64]) -> DMatrix<f64>;
    /// `C(q, q̇) q̇ + g(q)`.
    fn bias_forces(&self, phi: &[f64], q: &[f64], qd: &[f64]) -> DVector<f64>;
    fn friction(&self) -> &[f64];
    /// Kinetic plus potential energy.
    fn energy(&self, phi: &[f64], q: &[f64], qd: &[f64]) -> f64;
    fn context_names(&self) -> [&'static str; 2];
}

/// `I q̈ + m g sin q + b q̇ = u` with `φ = (I, m)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Pendulum {
    pub friction: [f64; 1],
}

/// Cart-pole with unit pole length, `q = (x, θ)` with `θ = 0` hanging down,
/// force on the cart; `φ = (m_cart, m_pole)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Cartpole {
    pub pole_length: f64,
    pub friction: [f64; 2],
}

/// Two-link arm actuated at the elbow; `φ = (I₂, m₂)`, the centroidal
/// inertia and mass of the second link. Angles measured from hanging down.
#[derive(Debug, Clone, PartialEq)]
pub struct Acrobot {
    pub m1: f64,
    pub l1: f64,
    pub lc1: f64,
    pub i1: f64,
    pub lc2: f64,
    pub friction: [f64; 2],
}

impl Default for Pendulum {
    fn default() -> Self {
        Self { friction: [0.1] }
    }
}

impl Default for Cartpole {
    fn default() -> Self {
        Self {
            pole_length: 1.0,
            friction: [0.1, 0.1],
        }
    }
}

impl Default for Acrobot {
    fn default() -> Self {
        Self {
            m1: 1.0,
            l1: 1.0,
            lc1: 0.5,
            i1: 1.0 / 12.0,
            lc2: 0.5,
            friction: [0.1, 0.1],
        }
    }
}

fn quad_form(m: &DMatrix<f64>, v: &[f64]) -> f64 {
    let v = DVector::from_column_slice(v);
    (v.transpose() * m * &v)[(0, 0)]
}

impl Manipulator for Pendulum {
    fn name(&self) -> &str {
        "pendulum"
    }
    fn dof(&self) -> usize {
        1
    }
    fn actuated(&self) -> usize {
        0
    }
    fn mass_matrix(&self, phi: &[f64], _q: &[f64]) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, phi[0])
    }
    fn bias_forces(&self, phi: &[f64], q: &[f64], _qd: &[f64]) -> DVector<f64> {
        DVector::from_element(1, phi[1] * GRAVITY * q[0].sin())
    }
    fn friction(&self) -> &[f64] {
        &self.friction
    }
    fn energy(&self, phi: &[f64], q: &[f64], qd: &[f64]) -> f64 {
        0.5 * phi[0] * qd[0] * qd[0] + phi[1] * GRAVITY * (1.0 - q[0].cos())
    }
    fn context_names(&self) -> [&'static str; 2] {
        ["inertia", "mass"]
    }
}

impl Manipulator for Cartpole {
    fn name(&self) -> &str {
        "cartpole"
    }
    fn dof(&self) -> usize {
        2
    }
    fn actuated(&self) -> usize {
        0
    }
    fn mass_matrix(&self, phi: &[f64], q: &[f64]) -> DMatrix<f64> {
        let (mc, mp, l) = (phi[0], phi[1], self.pole_length);
        let c = q[1].cos();
        DMatrix::from_row_slice(2, 2, &[mc + mp, mp * l * c, mp * l * c, mp * l * l])
    }
    fn bias_forces(&self, phi: &[f64], q: &[f64], qd: &[f64]) -> DVector<f64> {
        let (mp, l) = (phi[1], self.pole_length);
        let s = q[1].sin();
        DVector::from_column_slice(&[-mp * l * qd[1] * qd[1] * s, mp * GRAVITY * l * s])
    }
    fn friction(&self) -> &[f64] {
        &self.friction
    }
    fn energy(&self, phi: &[f64], q: &[f64], qd: &[f64]) -> f64 {
        let m = self.mass_matrix(phi, q);
        0.5 * quad_form(&m, qd) - phi[1] * GRAVITY * self.pole_length * q[1].cos()
    }
    fn context_names(&self) -> [&'static str; 2] {
        ["cart_mass", "pole_mass"]
    }
}

impl Manipulator for Acrobot {
    fn name(&self) -> &str {
        "arm"
    }
    fn dof(&self) -> usize {
        2
    }
    fn actuated(&self) -> usize {
        1
    }
    fn mass_matrix(&self, phi: &[f64], q: &[f64]) -> DMatrix<f64> {
        let (i2, m2) = (phi[0], phi[1]);
        let c2 = q[1].cos();
        let m11 = self.i1 + i2 + self.m1 * self.lc1.powi(2)
            + m2 * (self.l1.powi(2) + self.lc2.powi(2) + 2.0 * self.l1 * self.lc2 * c2);
        let m12 = i2 + m2 * (self.lc2.powi(2) + self.l1 * self.lc2 * c2);
        let m22 = i2 + m2 * self.lc2.powi(2);
        DMatrix::from_row_slice(2, 2, &[m11, m12, m12, m22])
    }
    fn bias_forces(&self, phi: &[f64], q: &[f64], qd: &[f64]) -> DVector<f64> {
        let m2 = phi[1];
        let (s1, s2, s12) = (q[0].sin(), q[1].sin(), (q[0] + q[1]).sin());
        let h = m2 * self.l1 * self.lc2 * s2;
        let b1 = -h * (2.0 * qd[0] * qd[1] + qd[1] * qd[1])
            + (self.m1 * self.lc1 + m2 * self.l1) * GRAVITY * s1
            + m2 * self.lc2 * GRAVITY * s12;
        let b2 = h * qd[0] * qd[0] + m2 * self.lc2 * GRAVITY * s12;
        DVector::from_column_slice(&[b1, b2])
    }
    fn friction(&self) -> &[f64] {
        &self.friction
    }
    fn energy(&self, phi: &[f64], q: &[f64], qd: &[f64]) -> f64 {
        let m = self.mass_matrix(phi, q);
        let m2 = phi[1];
        let pe = -self.m1 * GRAVITY * self.lc1 * q[0].cos()
            - m2 * GRAVITY * (self.l1 * q[0].cos() + self.lc2 * (q[0] + q[1]).cos());
        0.5 * quad_form(&m, qd) + pe
    }
    fn context_names(&self) -> [&'static str; 2] {
        ["inertia2", "mass2"]
    }
}

/// The manipulators used by the experiments, behind one concrete type.
#[derive(Debug, Clone, PartialEq)]
pub enum ManipulatorSystem {
    Pendulum(Pendulum),
    Cartpole(Cartpole),
    Acrobot(Acrobot),
}

impl ManipulatorSystem {
    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "pendulum" => Ok(Self::Pendulum(Pendulum::default())),
            "cartpole" => Ok(Self::Cartpole(Cartpole::default())),
            "arm" | "acrobot" => Ok(Self::Acrobot(Acrobot::default())),
            other => Err(Error::config(format!("unknown manipulator '{other}'"))),
        }
    }

    fn inner(&self) -> &dyn Manipulator {
        match self {
            Self::Pendulum(p) => p,
            Self::Cartpole(c) => c,
            Self::Acrobot(a) => a,
        }
    }

    /// Same system with every joint friction coefficient replaced.
    pub fn with_friction(&self, b: f64) -> Self {
        let mut s = self.clone();
        match &mut s {
            Self::Pendulum(p) => p.friction = [b],
            Self::Cartpole(c) => c.friction = [b; 2],
            Self::Acrobot(a) => a.friction = [b; 2],
        }
        s
    }

    fn check(&self, phi: &[f64], q: &[f64], qd: &[f64]) -> Result<()> {
        let d = self.dof();
        if phi.len() != 2 || q.len() != d || qd.len() != d {
            return Err(Error::shape(format!(
                "{} expects a 2-D context and {d}-D coordinates",
                Manipulator::name(self)
            )));
        }
        Ok(())
    }

    /// Actuation reproducing `q̈` at `(q, q̇)`: the actuated row of the
    /// manipulator equation including friction.
    pub fn inverse_dynamics(&self, phi: &[f64], q: &[f64], qd: &[f64], qdd: &[f64]) -> Result<f64> {
        self.check(phi, q, qd)?;
        if qdd.len() != self.dof() {
            return Err(Error::shape("acceleration has wrong dimension"));
        }
        let k = self.actuated();
        let m = self.mass_matrix(phi, q);
        let h = self.bias_forces(phi, q, qd);
        let row: f64 = (0..self.dof()).map(|j| m[(k, j)] * qdd[j]).sum();
        Ok(row + h[k] + self.friction()[k] * qd[k])
    }

    /// `q̈ = M⁻¹ (B u − C q̇ − g − F q̇)`.
    pub fn forward_dynamics(&self, phi: &[f64], q: &[f64], qd: &[f64], u: f64) -> Result<Vec<f64>> {
        self.check(phi, q, qd)?;
        let m = self.mass_matrix(phi, q);
        let mut rhs = -self.bias_forces(phi, q, qd);
        for (j, b) in self.friction().iter().enumerate() {
            rhs[j] -= b * qd[j];
        }
        rhs[self.actuated()] += u;
        let chol = m
            .cholesky()
            .ok_or_else(|| Error::Singularity(format!("{} mass matrix is not positive definite", Manipulator::name(self))))?;
        Ok(chol.solve(&rhs).iter().cloned().collect())
    }

    /// One classical RK4 step with the control held constant.
    pub fn step_rk4(&self, phi: &[f64], q: &[f64], qd: &[f64], u: f64, dt: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        let d = self.dof();
        let deriv = |q: &[f64], qd: &[f64]| -> Result<(Vec<f64>, Vec<f64>)> {
            Ok((qd.to_vec(), self.forward_dynamics(phi, q, qd, u)?))
        };
        let axpy = |x: &[f64], a: f64, y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, r)| p + a * r).collect() };
        let (k1q, k1v) = deriv(q, qd)?;
        let (k2q, k2v) = deriv(&axpy(q, dt / 2.0, &k1q), &axpy(qd, dt / 2.0, &k1v))?;
        let (k3q, k3v) = deriv(&axpy(q, dt / 2.0, &k2q), &axpy(qd, dt / 2.0, &k2v))?;
        let (k4q, k4v) = deriv(&axpy(q, dt, &k3q), &axpy(qd, dt, &k3v))?;
        let qn = (0..d)
            .map(|j| q[j] + dt / 6.0 * (k1q[j] + 2.0 * k2q[j] + 2.0 * k3q[j] + k4q[j]))
            .collect();
        let vn = (0..d)
            .map(|j| qd[j] + dt / 6.0 * (k1v[j] + 2.0 * k2v[j] + 2.0 * k3v[j] + k4v[j]))
            .collect();
        Ok((qn, vn))
    }

    /// Integrates `horizon` steps. `control(s, q, q̇)` gives the actuation
    /// held over step `s`; the stored `q̈_s` is the dynamics at the start of
    /// the step under that actuation.
    pub fn simulate<F>(
        &self,
        phi: &[f64],
        mut control: F,
        dt: f64,
        horizon: usize,
        q0: &[f64],
        qd0: &[f64],
    ) -> Result<Trajectory>
    where
        F: FnMut(usize, &[f64], &[f64]) -> f64,
    {
        if !(dt > 0.0) {
            return Err(Error::config("time step must be positive"));
        }
        self.check(phi, q0, qd0)?;
        let mut traj = Trajectory::with_capacity(dt, horizon);
        let (mut q, mut qd) = (q0.to_vec(), qd0.to_vec());
        for s in 0..horizon {
            let u = control(s, &q, &qd);
            let qdd = self.forward_dynamics(phi, &q, &qd, u)?;
            traj.push(q.clone(), qd.clone(), qdd, u);
            let (qn, vn) = self.step_rk4(phi, &q, &qd, u, dt)?;
            let norm = qn.iter().chain(&vn).map(|v| v * v).sum::<f64>().sqrt();
            if !norm.is_finite() || norm > BLOWUP_NORM {
                return Err(Error::Instability { step: s, norm });
            }
            q = qn;
            qd = vn;
        }
        Ok(traj)
    }
}

impl Manipulator for ManipulatorSystem {
    fn name(&self) -> &str {
        self.inner().name()
    }
    fn dof(&self) -> usize {
        self.inner().dof()
    }
    fn actuated(&self) -> usize {
        self.inner().actuated()
    }
    fn mass_matrix(&self, phi: &[f64], q: &[f64]) -> DMatrix<f64> {
        self.inner().mass_matrix(phi, q)
    }
    fn bias_forces(&self, phi: &[f64], q: &[f64], qd: &[f64]) -> DVector<f64> {
        self.inner().bias_forces(phi, q, qd)
    }
    fn friction(&self) -> &[f64] {
        self.inner().friction()
    }
    fn energy(&self, phi: &[f64], q: &[f64], qd: &[f64]) -> f64 {
        self.inner().energy(phi, q, qd)
    }
    fn context_names(&self) -> [&'static str; 2] {
        self.inner().context_names()
    }
}

/// Splits a learning input `x = (q, q̇, q̈)`.
pub fn split_state(x: &[f64], dof: usize) -> Result<(&[f64], &[f64], &[f64])> {
    if x.len() != 3 * dof {
        return Err(Error::shape(format!("state input must have length {}, got {}", 3 * dof, x.len())));
    }
    Ok((&x[..dof], &x[dof..2 * dof], &x[2 * dof..]))
}

impl PhysicalSystem for ManipulatorSystem {
    fn name(&self) -> &str {
        Manipulator::name(self)
    }
    fn context_dim(&self) -> usize {
        2
    }
    fn input_dim(&self) -> usize {
        3 * self.dof()
    }
    fn evaluate(&self, context: &[f64], x: &[f64]) -> Result<f64> {
        let (q, qd, qdd) = split_state(x, self.dof())?;
        self.inverse_dynamics(context, q, qd, qdd)
    }
}

impl LinearSystem for ManipulatorSystem {
    fn offset(&self, x: &[f64]) -> Result<f64> {
        self.evaluate(&[0.0, 0.0], x)
    }
    fn basis(&self, x: &[f64]) -> Result<Vec<f64>> {
        let k = self.offset(x)?;
        Ok(vec![self.evaluate(&[1.0, 0.0], x)? - k, self.evaluate(&[0.0, 1.0], x)? - k])
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    pub dt: f64,
    pub q: Vec<Vec<f64>>,
    pub qd: Vec<Vec<f64>>,
    pub qdd: Vec<Vec<f64>>,
    pub u: Vec<f64>,
}

impl Trajectory {
    pub fn with_capacity(dt: f64, n: usize) -> Self {
        Self {
            dt,
            q: Vec::with_capacity(n),
            qd: Vec::with_capacity(n),
            qdd: Vec::with_capacity(n),
            u: Vec::with_capacity(n),
        }
    }

    pub fn push(&mut self, q: Vec<f64>, qd: Vec<f64>, qdd: Vec<f64>, u: f64) {
        self.q.push(q);
        self.qd.push(qd);
        self.qdd.push(qdd);
        self.u.push(u);
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    /// Learning input `(q, q̇, q̈)` at step `s`.
    pub fn state_input(&self, s: usize) -> Vec<f64> {
        let mut x = self.q[s].clone();
        x.extend(&self.qd[s]);
        x.extend(&self.qdd[s]);
        x
    }

    pub fn to_task(&self, context: Option<Vec<f64>>) -> Result<TaskDataset> {
        let rows: Vec<Vec<f64>> = (0..self.len()).map(|s| self.state_input(s)).collect();
        TaskDataset::from_rows(&rows, &self.u, context)
    }
}

/// Sinusoidal excitation used to collect training trajectories.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySpec {
    pub trajectories: usize,
    pub length: usize,
    pub dt: f64,
    pub amplitude: (f64, f64),
    pub period: (f64, f64),
    /// Initial positions drawn uniformly in `[-q0, q0]` per coordinate.
    pub q0: f64,
    pub qd0: f64,
}

impl Default for TrajectorySpec {
    fn default() -> Self {
        Self {
            trajectories: 8,
            length: 200,
            dt: 0.01,
            amplitude: (2.0, 10.0),
            period: (0.5, 2.0),
            q0: std::f64::consts::PI,
            qd0: 2.0,
        }
    }
}

/// Sinusoid `A sin(2π t / P + ψ)` with `A`, `P`, `ψ` drawn from `spec`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sinusoid {
    pub amplitude: f64,
    pub period: f64,
    pub phase: f64,
}

impl Sinusoid {
    pub fn draw<R: Rng>(spec: &TrajectorySpec, rng: &mut R) -> Self {
        Self {
            amplitude: uniform(rng, spec.amplitude),
            period: uniform(rng, spec.period),
            phase: rng.gen_range(0.0..std::f64::consts::TAU),
        }
    }

    pub fn at(&self, t: f64) -> f64 {
        self.amplitude * (std::f64::consts::TAU * t / self.period + self.phase).sin()
    }
}

fn uniform<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

/// Simulates `spec.trajectories` sinusoidally-actuated runs for one
/// context and concatenates them.
pub fn sinusoidal_task<R: Rng>(
    sys: &ManipulatorSystem,
    context: &[f64],
    spec: &TrajectorySpec,
    rng: &mut R,
) -> Result<(TaskDataset, Vec<Trajectory>)> {
    let d = sys.dof();
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    let mut trajs = Vec::new();
    for _ in 0..spec.trajectories {
        let sig = Sinusoid::draw(spec, rng);
        let q0: Vec<f64> = (0..d).map(|_| uniform(rng, (-spec.q0, spec.q0))).collect();
        let qd0: Vec<f64> = (0..d).map(|_| uniform(rng, (-spec.qd0, spec.qd0))).collect();
        let traj = sys.simulate(context, |s, _, _| sig.at(s as f64 * spec.dt), spec.dt, spec.length, &q0, &qd0)?;
        for s in 0..traj.len() {
            rows.push(traj.state_input(s));
            targets.push(traj.u[s]);
        }
        trajs.push(traj);
    }
    Ok((TaskDataset::from_rows(&rows, &targets, Some(context.to_vec()))?, trajs))
}

/// Trajectory meta-dataset: one task per context, never shared-grid.
pub fn build_trajectory_dataset(
    sys: &ManipulatorSystem,
    contexts: &[Vec<f64>],
    spec: &TrajectorySpec,
    noise: f64,
    seed: u64,
) -> Result<MetaDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tasks = Vec::with_capacity(contexts.len());
    for ctx in contexts {
        let (task, _) = sinusoidal_task(sys, ctx, spec, &mut rng)?;
        let task = if noise > 0.0 {
            let mut y = task.targets().clone();
            add_noise(&mut y, noise, &mut rng)?;
            task.with_targets(y)?
        } else {
            task
        };
        tasks.push(task);
    }
    MetaDataset::new(tasks, false)
}
