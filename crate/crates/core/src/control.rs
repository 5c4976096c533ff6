//! Inverse-dynamics trajectory tracking.
//!
//! The feedforward `û_s` is the predicted actuation along the target state
//! `x̄_s = (q̄_s, q̄̇_s, q̄̈_s)`; feedback acts on the actuated coordinate:
//! `u_s = û_s + K (q̄ − q)_a + K' (q̄̇ − q̇)_a`.

use std::io::{BufRead, Write};
use std::path::Path;

use crate::adaptation::RlsState;
use crate::error::{Error, Result};
use crate::identification::{estimate_context, IdentificationMap};
use crate::meta::{MetaModel, Normalizer};
use crate::systems::manipulator::BLOWUP_NORM;
use crate::systems::{Manipulator, ManipulatorSystem, Trajectory};

#[derive(Debug, Clone, PartialEq)]
pub struct TrackingConfig {
    pub k: f64,
    pub k_d: f64,
    /// Adds the `K' ė` term in adaptive mode; the plain listing uses `K e` only.
    pub adaptive_derivative: bool,
    pub feedback: FeedbackAxes,
    pub target: Trajectory,
}

/// Which coordinate errors enter the scalar feedback term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FeedbackAxes {
    /// Only the actuated coordinate.
    #[default]
    Actuated,
    /// The sum over all coordinates.
    All,
}

impl TrackingConfig {
    pub fn new(k: f64, k_d: f64, target: Trajectory) -> Result<Self> {
        let cfg = Self {
            k,
            k_d,
            adaptive_derivative: false,
            feedback: FeedbackAxes::default(),
            target,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn horizon(&self) -> usize {
        self.target.len()
    }

    pub fn dt(&self) -> f64 {
        self.target.dt
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.k >= 0.0 && self.k_d >= 0.0) || !self.k.is_finite() || !self.k_d.is_finite() {
            return Err(Error::config(format!("gains must be finite and >= 0, got K={} K'={}", self.k, self.k_d)));
        }
        if self.target.is_empty() {
            return Err(Error::config("target trajectory is empty"));
        }
        if !(self.target.dt > 0.0) {
            return Err(Error::config("target time step must be positive"));
        }
        let t = &self.target;
        let n = t.len();
        if t.q.len() != n || t.qd.len() != n || t.qdd.len() != n {
            return Err(Error::shape("target state columns have inconsistent lengths"));
        }
        Ok(())
    }

    fn feedback(&self, s: usize, axis: usize, q: &[f64], qd: &[f64], derivative: bool) -> f64 {
        let t = &self.target;
        let axes = match self.feedback {
            FeedbackAxes::Actuated => axis..axis + 1,
            FeedbackAxes::All => 0..q.len(),
        };
        let mut u = 0.0;
        for j in axes {
            u += self.k * (t.q[s][j] - q[j]);
            if derivative {
                u += self.k_d * (t.qd[s][j] - qd[j]);
            }
        }
        u
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrackingReport {
    /// Realized plant trajectory; `u` holds the applied controls.
    pub realized: Trajectory,
    pub feedforward: Vec<f64>,
    /// `‖q_s − q̄_s‖` per step.
    pub error: Vec<f64>,
    /// Empty in fixed mode.
    pub phi_hat: Vec<Vec<f64>>,
    /// The weight used at each step; constant in fixed mode.
    pub weights: Vec<Vec<f64>>,
    /// Condition number of the online information matrix per step.
    pub information_condition: Vec<f64>,
}

impl TrackingReport {
    pub fn len(&self) -> usize {
        self.error.len()
    }

    pub fn is_empty(&self) -> bool {
        self.error.is_empty()
    }

    pub fn rms_error(&self) -> f64 {
        rms(&self.error)
    }

    pub fn max_error(&self) -> f64 {
        self.error.iter().cloned().fold(0.0, f64::max)
    }

    /// RMS error over steps `[from, to)`.
    pub fn window_rms(&self, from: usize, to: usize) -> f64 {
        rms(&self.error[from.min(self.len())..to.min(self.len())])
    }

    pub fn write_csv<W: Write>(&self, target: &Trajectory, mut out: W) -> std::io::Result<()> {
        let dof = target.q.first().map_or(0, |q| q.len());
        let ctx = self.phi_hat.first().map_or(0, |p| p.len());
        let mut header = vec!["step".to_string()];
        header.extend((0..dof).map(|j| format!("q{j}")));
        header.extend((0..dof).map(|j| format!("q_target{j}")));
        header.extend(["u".into(), "u_hat".into(), "error".into()]);
        header.extend((0..ctx).map(|j| format!("phi_hat{j}")));
        writeln!(out, "{}", header.join(","))?;
        for s in 0..self.len() {
            let mut row = vec![s.to_string()];
            row.extend(self.realized.q[s].iter().map(|v| v.to_string()));
            row.extend(target.q[s].iter().map(|v| v.to_string()));
            row.push(self.realized.u[s].to_string());
            row.push(self.feedforward[s].to_string());
            row.push(self.error[s].to_string());
            if let Some(p) = self.phi_hat.get(s) {
                row.extend(p.iter().map(|v| v.to_string()));
            }
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

fn rms(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    (v.iter().map(|e| e * e).sum::<f64>() / v.len() as f64).sqrt()
}

/// A learned inverse-dynamics model with its data normalization.
#[derive(Debug, Clone)]
pub struct LearnedDynamics {
    pub model: MetaModel,
    pub normalizer: Normalizer,
}

impl LearnedDynamics {
    pub fn new(model: MetaModel, normalizer: Normalizer) -> Result<Self> {
        if normalizer.input_mean.len() != model.net().input_dim() {
            return Err(Error::shape("normalizer does not match the model input"));
        }
        Ok(Self { model, normalizer })
    }

    /// `(v(x), c(x))` in normalized target units.
    pub fn features(&self, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        self.model.net().forward(&self.normalizer.input(x))
    }

    /// Predicted actuation in physical units.
    pub fn predict(&self, w: &[f64], x: &[f64]) -> Result<f64> {
        let (v, c) = self.features(x)?;
        if v.len() != w.len() {
            return Err(Error::shape(format!("weight length {} != rank {}", w.len(), v.len())));
        }
        Ok(self.normalizer.output(c + v.iter().zip(w).map(|(a, b)| a * b).sum::<f64>()))
    }
}

/// Source of the feedforward term `û(x̄)`.
pub trait Feedforward {
    fn feedforward(&self, x: &[f64]) -> Result<f64>;
}

/// Learned model with a fixed task weight.
pub struct LearnedFeedforward<'a> {
    pub dynamics: &'a LearnedDynamics,
    pub w: Vec<f64>,
}

impl Feedforward for LearnedFeedforward<'_> {
    fn feedforward(&self, x: &[f64]) -> Result<f64> {
        self.dynamics.predict(&self.w, x)
    }
}

/// Analytic inverse dynamics of a known system at a known context.
pub struct AnalyticFeedforward {
    pub system: ManipulatorSystem,
    pub phi: Vec<f64>,
}

impl Feedforward for AnalyticFeedforward {
    fn feedforward(&self, x: &[f64]) -> Result<f64> {
        let d = self.system.dof();
        self.system.inverse_dynamics(&self.phi, &x[..d], &x[d..2 * d], &x[2 * d..3 * d])
    }
}

/// One closed-loop policy: `control` picks the actuation held over step
/// `s`, `observe` receives the realized input `(q_s, q̇_s, q̈_s)` and `u_s`.
trait Policy {
    fn control(&mut self, s: usize, q: &[f64], qd: &[f64]) -> Result<f64>;
    fn observe(&mut self, _s: usize, _x: &[f64], _u: f64) -> Result<()> {
        Ok(())
    }
}

/// Steps the plant from the target's initial state. `schedule(s)` is the
/// true context during step `s`.
fn run_loop<S, P>(plant: &ManipulatorSystem, schedule: S, cfg: &TrackingConfig, policy: &mut P) -> Result<(Trajectory, Vec<f64>)>
where
    S: Fn(usize) -> Vec<f64>,
    P: Policy,
{
    cfg.validate()?;
    let target = &cfg.target;
    let d = plant.dof();
    if target.q[0].len() != d {
        return Err(Error::shape(format!("target has {} coordinates, plant has {d}", target.q[0].len())));
    }
    let dt = target.dt;
    let mut realized = Trajectory::with_capacity(dt, target.len());
    let mut error = Vec::with_capacity(target.len());
    let (mut q, mut qd) = (target.q[0].clone(), target.qd[0].clone());
    for s in 0..target.len() {
        let phi = schedule(s);
        error.push(q.iter().zip(&target.q[s]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt());
        let u = policy.control(s, &q, &qd)?;
        let qdd = plant.forward_dynamics(&phi, &q, &qd, u)?;
        realized.push(q.clone(), qd.clone(), qdd, u);
        policy.observe(s, &realized.state_input(s), u)?;
        let (qn, vn) = plant.step_rk4(&phi, &q, &qd, u, dt)?;
        let norm = qn.iter().chain(&vn).map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() || norm > BLOWUP_NORM {
            return Err(Error::Instability { step: s, norm });
        }
        q = qn;
        qd = vn;
    }
    Ok((realized, error))
}

struct FixedPolicy<'a> {
    cfg: &'a TrackingConfig,
    axis: usize,
    u_hat: &'a [f64],
}

impl Policy for FixedPolicy<'_> {
    fn control(&mut self, s: usize, q: &[f64], qd: &[f64]) -> Result<f64> {
        Ok(self.u_hat[s] + self.cfg.feedback(s, self.axis, q, qd, true))
    }
}

/// Tracking with a fixed feedforward source.
pub fn track_fixed<F: Feedforward + ?Sized>(
    feedforward: &F,
    plant: &ManipulatorSystem,
    phi_true: &[f64],
    cfg: &TrackingConfig,
) -> Result<TrackingReport> {
    cfg.validate()?;
    let u_hat = (0..cfg.horizon())
        .map(|s| feedforward.feedforward(&cfg.target.state_input(s)))
        .collect::<Result<Vec<_>>>()?;
    let mut policy = FixedPolicy {
        cfg,
        axis: plant.actuated(),
        u_hat: &u_hat,
    };
    let (realized, error) = run_loop(plant, |_| phi_true.to_vec(), cfg, &mut policy)?;
    Ok(TrackingReport {
        realized,
        feedforward: u_hat,
        error,
        ..Default::default()
    })
}

/// Convenience wrapper for a learned model with weight `w`.
pub fn track_fixed_learned(
    dynamics: &LearnedDynamics,
    w: &[f64],
    plant: &ManipulatorSystem,
    phi_true: &[f64],
    cfg: &TrackingConfig,
) -> Result<TrackingReport> {
    let ff = LearnedFeedforward {
        dynamics,
        w: w.to_vec(),
    };
    let mut report = track_fixed(&ff, plant, phi_true, cfg)?;
    report.weights = vec![w.to_vec(); report.len()];
    Ok(report)
}

struct AdaptivePolicy<'a> {
    cfg: &'a TrackingConfig,
    axis: usize,
    dynamics: &'a LearnedDynamics,
    target_features: Vec<(Vec<f64>, f64)>,
    id_map: Option<&'a IdentificationMap>,
    rls: RlsState,
    feedforward: Vec<f64>,
    weights: Vec<Vec<f64>>,
    phi_hat: Vec<Vec<f64>>,
    conditions: Vec<f64>,
}

impl Policy for AdaptivePolicy<'_> {
    fn control(&mut self, s: usize, q: &[f64], qd: &[f64]) -> Result<f64> {
        let (v, c) = &self.target_features[s];
        let w = self.rls.weights();
        let u_hat = self.dynamics.normalizer.output(c + v.iter().zip(w).map(|(a, b)| a * b).sum::<f64>());
        self.feedforward.push(u_hat);
        self.weights.push(w.to_vec());
        self.conditions.push(self.rls.information_condition());
        if let Some(map) = self.id_map {
            self.phi_hat.push(estimate_context(map, w)?);
        }
        Ok(u_hat + self.cfg.feedback(s, self.axis, q, qd, self.cfg.adaptive_derivative))
    }

    fn observe(&mut self, _s: usize, x: &[f64], u: f64) -> Result<()> {
        let (v, c) = self.dynamics.features(x)?;
        self.rls.update(&v, u / self.dynamics.normalizer.target_scale - c)
    }
}

/// Online adaptive tracking. Target features are computed before the loop;
/// at each step the plant receives `ω_sᵀ v̄_s + c̄_s + K e_s`, then the
/// realized pair `(v(x_s), u_s − c(x_s))` updates the running estimate,
/// starting from `ω₀ = 0`, `M₀ = I`.
pub fn track_adaptive<S>(
    dynamics: &LearnedDynamics,
    plant: &ManipulatorSystem,
    schedule: S,
    cfg: &TrackingConfig,
    id_map: Option<&IdentificationMap>,
) -> Result<TrackingReport>
where
    S: Fn(usize) -> Vec<f64>,
{
    cfg.validate()?;
    let target_features = (0..cfg.horizon())
        .map(|s| dynamics.features(&cfg.target.state_input(s)))
        .collect::<Result<Vec<_>>>()?;
    let mut policy = AdaptivePolicy {
        cfg,
        axis: plant.actuated(),
        dynamics,
        target_features,
        id_map,
        rls: RlsState::new(dynamics.model.rank()),
        feedforward: Vec::new(),
        weights: Vec::new(),
        phi_hat: Vec::new(),
        conditions: Vec::new(),
    };
    let (realized, error) = run_loop(plant, schedule, cfg, &mut policy)?;
    Ok(TrackingReport {
        realized,
        feedforward: policy.feedforward,
        error,
        phi_hat: policy.phi_hat,
        weights: policy.weights,
        information_condition: policy.conditions,
    })
}

/// Scripted energy-shaping swing-up for the cartpole, used to produce
/// target trajectories. The cart acceleration command is
/// `a = k_e (E − E*) θ̇ cos θ − k_x x − k_v ẋ + A sin(2π t / P)`, clamped to
/// `±a_max`, with `E = ½ l² θ̇² − g l cos θ` per unit pole mass and
/// `E* = −g l cos θ*`; the cart force realizing `a` comes from collocated
/// feedback linearization on the same plant.
#[derive(Debug, Clone, PartialEq)]
pub struct SwingUpConfig {
    pub horizon: usize,
    pub dt: f64,
    /// Peak pole angle the energy target corresponds to (0 hangs down).
    pub peak_angle: f64,
    pub k_energy: f64,
    pub k_x: f64,
    pub k_v: f64,
    pub max_accel: f64,
    pub excitation_amplitude: f64,
    pub excitation_period: f64,
    pub theta0: f64,
}

impl Default for SwingUpConfig {
    fn default() -> Self {
        Self {
            horizon: 1000,
            dt: 0.01,
            peak_angle: 2.6,
            k_energy: 1.0,
            k_x: 1.0,
            k_v: 1.5,
            max_accel: 8.0,
            excitation_amplitude: 1.5,
            excitation_period: 1.3,
            theta0: 0.1,
        }
    }
}

pub fn swing_up_target(plant: &ManipulatorSystem, phi: &[f64], cfg: &SwingUpConfig) -> Result<Trajectory> {
    let ManipulatorSystem::Cartpole(cp) = plant else {
        return Err(Error::config(format!(
            "swing-up targets are defined for the cartpole, not '{}'",
            Manipulator::name(plant)
        )));
    };
    if cfg.horizon == 0 || !(cfg.dt > 0.0) || !(cfg.max_accel > 0.0) {
        return Err(Error::config("swing-up needs a positive horizon, time step and acceleration bound"));
    }
    let g = crate::systems::manipulator::GRAVITY;
    let l = cp.pole_length;
    let mp = phi[1];
    let b_pole = cp.friction[1];
    let e_star = -g * l * cfg.peak_angle.cos();
    let q0 = [0.0, cfg.theta0];
    plant.simulate(
        phi,
        |s, q, qd| {
            let (x, th) = (q[0], q[1]);
            let (xd, thd) = (qd[0], qd[1]);
            let t = s as f64 * cfg.dt;
            let e = 0.5 * l * l * thd * thd - g * l * th.cos();
            let a = (cfg.k_energy * (e - e_star) * thd * th.cos() - cfg.k_x * x - cfg.k_v * xd
                + cfg.excitation_amplitude * (std::f64::consts::TAU * t / cfg.excitation_period).sin())
            .clamp(-cfg.max_accel, cfg.max_accel);
            let thdd = -(a * th.cos() + g * th.sin()) / l - b_pole * thd / (mp * l * l);
            plant.inverse_dynamics(phi, q, qd, &[a, thdd]).unwrap_or(0.0)
        },
        cfg.dt,
        cfg.horizon,
        &q0,
        &[0.0, 0.0],
    )
}

/// Writes a trajectory as CSV: `t, q.., qd.., qdd.., u`.
pub fn write_trajectory_csv<W: Write>(traj: &Trajectory, mut out: W) -> std::io::Result<()> {
    let d = traj.q.first().map_or(0, |q| q.len());
    let mut header = vec!["t".to_string()];
    for name in ["q", "qd", "qdd"] {
        header.extend((0..d).map(|j| format!("{name}{j}")));
    }
    header.push("u".into());
    writeln!(out, "{}", header.join(","))?;
    for s in 0..traj.len() {
        let mut row = vec![format!("{:e}", s as f64 * traj.dt)];
        for col in [&traj.q[s], &traj.qd[s], &traj.qdd[s]] {
            row.extend(col.iter().map(|v| format!("{v:e}")));
        }
        row.push(format!("{:e}", traj.u[s]));
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

pub fn read_trajectory_csv<R: BufRead>(input: R) -> Result<Trajectory> {
    let mut lines = input.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse("empty trajectory file".into()))?
        .map_err(|e| Error::Parse(e.to_string()))?;
    let cols = header.split(',').count();
    if cols < 5 || (cols - 2) % 3 != 0 {
        return Err(Error::Parse(format!("unexpected trajectory header '{header}'")));
    }
    let d = (cols - 2) / 3;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::Parse(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|v| v.trim().parse::<f64>().map_err(|e| Error::Parse(format!("line {}: {e}", i + 2))))
            .collect::<Result<Vec<_>>>()?;
        if row.len() != cols {
            return Err(Error::Parse(format!("line {} has {} fields, expected {cols}", i + 2, row.len())));
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Parse("trajectory has no rows".into()));
    }
    let dt = if rows.len() > 1 { rows[1][0] - rows[0][0] } else { 0.01 };
    if !(dt > 0.0) {
        return Err(Error::Parse("trajectory times must increase".into()));
    }
    let mut traj = Trajectory::with_capacity(dt, rows.len());
    for r in &rows {
        traj.push(r[1..1 + d].to_vec(), r[1 + d..1 + 2 * d].to_vec(), r[1 + 2 * d..1 + 3 * d].to_vec(), r[cols - 1]);
    }
    Ok(traj)
}

pub fn load_trajectory(path: impl AsRef<Path>) -> Result<Trajectory> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_trajectory_csv(std::io::BufReader::new(file))
}

pub fn save_trajectory(traj: &Trajectory, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    write_trajectory_csv(traj, &mut out).map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests;
