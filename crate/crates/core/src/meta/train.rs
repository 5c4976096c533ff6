use log::debug;

use super::dataset::MetaDataset;
use nalgebra::{DMatrix, DVector};

use super::model::{dot, MetaModel, RegConfig, Variant};
use crate::error::{Error, Result};
use crate::nn::AdamState;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    /// Learning rate reached at the last step; the schedule decays
    /// geometrically from `learning_rate`. Equal to `learning_rate` for a
    /// constant schedule.
    pub final_learning_rate: f64,
    pub reg: RegConfig,
    /// Stop early once the meta-loss drops below this value.
    pub target_loss: Option<f64>,
    /// Damped Gauss-Newton iterations run after the Adam phase, CAMEL only.
    pub refine_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            learning_rate: 1e-2,
            final_learning_rate: 1e-2,
            reg: RegConfig::default(),
            target_loss: None,
            refine_steps: 0,
        }
    }
}

impl TrainConfig {
    fn rate_at(&self, step: usize) -> f64 {
        if self.steps <= 1 || self.final_learning_rate == self.learning_rate {
            return self.learning_rate;
        }
        let frac = step as f64 / (self.steps - 1) as f64;
        self.learning_rate * (self.final_learning_rate / self.learning_rate).powf(frac)
    }

    fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !(self.final_learning_rate > 0.0) {
            return Err(Error::config("learning rates must be positive"));
        }
        if self.reg.lambda < 0.0 {
            return Err(Error::config("regularization weight must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: MetaModel,
    /// Meta-loss evaluated before each update, so `history[0]` is the
    /// initial loss.
    pub history: Vec<f64>,
    pub final_loss: f64,
}

/// Full-batch joint gradient descent (Adam) on every meta-parameter.
pub fn train(model: &MetaModel, meta: &MetaDataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut model = model.clone();
    let mut net_opt = AdamState::new(model.net().len(), cfg.learning_rate);
    let mut task_opt = AdamState::new(model.task_flat().len(), cfg.learning_rate);
    let mut history = Vec::with_capacity(cfg.steps + 1);

    for step in 0..cfg.steps {
        let grad = model.meta_gradient(meta, cfg.reg)?;
        if !grad.loss.is_finite() {
            return Err(Error::Divergence {
                step,
                reason: format!("meta-loss is {}", grad.loss),
            });
        }
        history.push(grad.loss);
        if cfg.target_loss.is_some_and(|t| grad.loss <= t) {
            debug!("target loss reached at step {step}: {:e}", grad.loss);
            break;
        }
        let lr = cfg.rate_at(step);
        net_opt.learning_rate = lr;
        task_opt.learning_rate = lr;
        net_opt.step(model.net_mut().flat_mut(), &grad.net).map_err(|e| at_step(e, step))?;
        let mut task = model.task_flat();
        task_opt.step(&mut task, &grad.task).map_err(|e| at_step(e, step))?;
        model.set_task_flat(&task)?;
        if step % 1000 == 0 {
            debug!("step {step}: meta-loss {:e}", grad.loss);
        }
    }
    let reached = cfg.target_loss.is_some_and(|t| history.last().is_some_and(|l| *l <= t));
    if cfg.refine_steps > 0 && !reached {
        refine(&mut model, meta, cfg, &mut history)?;
    }
    let final_loss = model.meta_loss(meta, cfg.reg)?;
    if !final_loss.is_finite() {
        return Err(Error::Divergence {
            step: cfg.steps,
            reason: format!("final meta-loss is {final_loss}"),
        });
    }
    Ok(TrainOutcome {
        model,
        history,
        final_loss,
    })
}

/// Levenberg-Marquardt on the stacked residuals `F(x_i; θ, ω_t) − y_ti`
/// and `√(2λ)·ω_t`, whose half squared norm is the CAMEL meta-loss.
fn refine(model: &mut MetaModel, meta: &MetaDataset, cfg: &TrainConfig, history: &mut Vec<f64>) -> Result<()> {
    if model.variant() != Variant::Camel {
        return Err(Error::config("Gauss-Newton refinement is only defined for CAMEL"));
    }
    let mut loss = model.meta_loss(meta, cfg.reg)?;
    let mut damping: Option<f64> = None;
    let mut step = 0;
    while step < cfg.refine_steps {
        let (jac, res) = residual_jacobian(model, meta, cfg.reg)?;
        let gram = jac.transpose() * &jac;
        let grad = jac.transpose() * &res;
        let mu0 = *damping.get_or_insert_with(|| 1e-3 * gram.diagonal().mean().max(1e-12));
        let mut mu = mu0;
        let mut accepted = false;
        while !accepted && step < cfg.refine_steps {
            step += 1;
            let mut a = gram.clone();
            for i in 0..a.nrows() {
                a[(i, i)] += mu;
            }
            let Some(chol) = a.cholesky() else {
                mu *= 4.0;
                continue;
            };
            let delta = chol.solve(&grad);
            let mut trial = model.clone();
            let p = trial.net().len();
            for (v, d) in trial.net_mut().flat_mut().iter_mut().zip(delta.iter()) {
                *v -= d;
            }
            let task: Vec<f64> = model.task_flat().iter().zip(delta.rows(p, delta.len() - p).iter()).map(|(v, d)| v - d).collect();
            trial.set_task_flat(&task)?;
            let trial_loss = trial.meta_loss(meta, cfg.reg)?;
            if trial_loss.is_finite() && trial_loss < loss {
                *model = trial;
                loss = trial_loss;
                history.push(loss);
                mu /= 3.0;
                accepted = true;
            } else {
                mu *= 4.0;
            }
        }
        damping = Some(mu);
        if !accepted || cfg.target_loss.is_some_and(|t| loss <= t) || mu > 1e20 {
            break;
        }
    }
    debug!("refinement finished after {step} iterations: meta-loss {loss:e}");
    Ok(())
}

fn residual_jacobian(model: &MetaModel, meta: &MetaDataset, reg: RegConfig) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let net = model.net();
    let (p, r) = (net.len(), model.rank());
    let bank = model.weight_bank(meta)?;
    let n_tasks = meta.num_tasks();
    let pen = reg.lambda > 0.0;
    let rows = meta.total_samples() + if pen { n_tasks * r } else { 0 };
    let cols = p + n_tasks * r;
    let mut jac = DMatrix::zeros(rows, cols);
    let mut res = DVector::zeros(rows);
    let bias_head = net.architecture().bias_head();
    let mut row = 0;
    let mut shared: Vec<(DMatrix<f64>, Vec<f64>, f64)> = Vec::new();
    for (t, task) in meta.tasks().iter().enumerate() {
        let mut coef = DMatrix::zeros(1, net.architecture().output_dim());
        for k in 0..r {
            coef[(0, k)] = bank[(t, k)];
        }
        if bias_head {
            coef[(0, r)] = 1.0;
        }
        for i in 0..task.len() {
            let x = task.input(i);
            let fresh;
            let (oj, v, c) = if meta.shared_grid() {
                if shared.len() <= i {
                    let (v, c) = net.forward(&x)?;
                    shared.push((net.output_jacobian(&x)?, v, c));
                }
                let s = &shared[i];
                (&s.0, &s.1, s.2)
            } else {
                let (v, c) = net.forward(&x)?;
                fresh = (net.output_jacobian(&x)?, v, c);
                (&fresh.0, &fresh.1, fresh.2)
            };
            jac.view_mut((row, 0), (1, p)).copy_from(&(&coef * oj));
            for k in 0..r {
                jac[(row, p + t * r + k)] = v[k];
            }
            res[row] = c + dot(&bank.row(t).iter().cloned().collect::<Vec<_>>(), v) - task.targets()[i];
            row += 1;
        }
    }
    if pen {
        let s = (2.0 * reg.lambda).sqrt();
        for t in 0..n_tasks {
            for k in 0..r {
                jac[(row, p + t * r + k)] = s;
                res[row] = s * bank[(t, k)];
                row += 1;
            }
        }
    }
    Ok((jac, res))
}

fn at_step(e: Error, step: usize) -> Error {
    match e {
        Error::Divergence { reason, .. } => Error::Divergence { step, reason },
        other => other,
    }
}
