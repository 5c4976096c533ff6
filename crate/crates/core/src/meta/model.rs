use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::dataset::{MetaDataset, TaskDataset};
use crate::error::{Error, Result};
use crate::nn::checkpoint::{self, Header};
use crate::nn::{init_network, Architecture, NetworkParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Task weights stored directly as meta-parameters.
    Camel,
    /// Head weights produced by a linear hypernetwork from per-task contexts.
    Coda,
    /// One first-order inner gradient step on the head.
    AnilFo,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Camel => "camel",
            Variant::Coda => "coda",
            Variant::AnilFo => "anil-fo",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::Camel => "CAMEL",
            Variant::Coda => "CoDA",
            Variant::AnilFo => "ANIL-FO",
        }
    }

    /// Whether test-time adaptation is closed form.
    pub fn closed_form(self) -> bool {
        self == Variant::Camel
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "camel" => Ok(Variant::Camel),
            "coda" | "l1-coda" => Ok(Variant::Coda),
            "anil" | "anil-fo" => Ok(Variant::AnilFo),
            other => Err(Error::config(format!("unknown variant '{other}'"))),
        }
    }
}

/// Per-variant meta-parameters beyond the shared network.
#[derive(Debug, Clone, PartialEq)]
pub enum TaskParams {
    Camel {
        /// `T x r`, row `t` is `ω_t`.
        bank: DMatrix<f64>,
    },
    Coda {
        base: DVector<f64>,
        /// `r x d_ξ`.
        hyper: DMatrix<f64>,
        /// `T x d_ξ`, row `t` is `ξ_t`.
        contexts: DMatrix<f64>,
    },
    AnilFo {
        init: DVector<f64>,
        inner_lr: f64,
    },
}

/// Regularization weight: `λ Σ‖ω_t‖²` for CAMEL, `λ Σ‖ξ_t‖₁` for CoDA,
/// unused for ANIL.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RegConfig {
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaModel {
    net: NetworkParams,
    task: TaskParams,
}

/// Loss and gradients of the meta-loss with respect to every meta-parameter.
#[derive(Debug, Clone)]
pub struct MetaGradient {
    pub loss: f64,
    pub net: Vec<f64>,
    /// Same layout as [`MetaModel::task_flat`].
    pub task: Vec<f64>,
}

impl MetaModel {
    /// Fresh model with zero task weights. `inner_lr` only matters for ANIL.
    pub fn new(variant: Variant, arch: Architecture, num_tasks: usize, seed: u64, inner_lr: f64) -> Result<Self> {
        let r = arch.rank();
        if variant == Variant::Camel && r >= num_tasks {
            return Err(Error::config(format!(
                "task-weight dimension r = {r} must be smaller than the number of training tasks T = {num_tasks}"
            )));
        }
        if num_tasks == 0 {
            return Err(Error::config("need at least one training task"));
        }
        let net = init_network(arch, seed);
        let task = match variant {
            Variant::Camel => TaskParams::Camel {
                bank: DMatrix::zeros(num_tasks, r),
            },
            Variant::Coda => {
                // d_ξ = r; hypernetwork drawn like a layer so ξ receives gradient from step one
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
                let lim = 1.0 / (r as f64).sqrt();
                let dist = Uniform::new_inclusive(-lim, lim);
                TaskParams::Coda {
                    base: DVector::zeros(r),
                    hyper: DMatrix::from_fn(r, r, |_, _| dist.sample(&mut rng)),
                    contexts: DMatrix::zeros(num_tasks, r),
                }
            }
            Variant::AnilFo => TaskParams::AnilFo {
                init: DVector::zeros(r),
                inner_lr,
            },
        };
        Ok(Self { net, task })
    }

    pub fn from_parts(net: NetworkParams, task: TaskParams) -> Result<Self> {
        let r = net.rank();
        let ok = match &task {
            TaskParams::Camel { bank } => bank.ncols() == r,
            TaskParams::Coda { base, hyper, contexts } => {
                base.len() == r && hyper.nrows() == r && contexts.ncols() == hyper.ncols()
            }
            TaskParams::AnilFo { init, .. } => init.len() == r,
        };
        if !ok {
            return Err(Error::shape("task parameters do not match the network rank"));
        }
        Ok(Self { net, task })
    }

    pub fn variant(&self) -> Variant {
        match self.task {
            TaskParams::Camel { .. } => Variant::Camel,
            TaskParams::Coda { .. } => Variant::Coda,
            TaskParams::AnilFo { .. } => Variant::AnilFo,
        }
    }

    pub fn net(&self) -> &NetworkParams {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut NetworkParams {
        &mut self.net
    }

    pub fn task_params(&self) -> &TaskParams {
        &self.task
    }

    pub fn rank(&self) -> usize {
        self.net.rank()
    }

    pub fn num_tasks(&self) -> Option<usize> {
        match &self.task {
            TaskParams::Camel { bank } => Some(bank.nrows()),
            TaskParams::Coda { contexts, .. } => Some(contexts.nrows()),
            TaskParams::AnilFo { .. } => None,
        }
    }

    /// Total count of trained scalars, `dim(π)`.
    pub fn meta_dim(&self) -> usize {
        self.net.len() + self.task_flat().len()
    }

    /// Head weight a fresh environment starts from before adaptation.
    pub fn prior_weights(&self) -> Vec<f64> {
        match &self.task {
            TaskParams::Camel { bank } => vec![0.0; bank.ncols()],
            TaskParams::Coda { base, .. } => base.iter().cloned().collect(),
            TaskParams::AnilFo { init, .. } => init.iter().cloned().collect(),
        }
    }

    /// Learned weight bank `T x r` (`w_t` for every training task). For
    /// ANIL the bank depends on the data and is produced by the inner step.
    pub fn weight_bank(&self, meta: &MetaDataset) -> Result<DMatrix<f64>> {
        let r = self.rank();
        let mut bank = DMatrix::zeros(meta.num_tasks(), r);
        for (t, task) in meta.tasks().iter().enumerate() {
            let w = self.task_weights(t, task)?;
            bank.row_mut(t).copy_from_slice(&w);
        }
        Ok(bank)
    }

    /// `w_t = A(π, D_t)`.
    pub fn task_weights(&self, t: usize, dataset: &TaskDataset) -> Result<Vec<f64>> {
        match &self.task {
            TaskParams::Camel { bank } => {
                if t >= bank.nrows() {
                    return Err(Error::shape(format!("task {t} out of range {}", bank.nrows())));
                }
                Ok(bank.row(t).iter().cloned().collect())
            }
            TaskParams::Coda { base, hyper, contexts } => {
                if t >= contexts.nrows() {
                    return Err(Error::shape(format!("task {t} out of range {}", contexts.nrows())));
                }
                let xi = contexts.row(t).transpose();
                Ok((base + hyper * xi).iter().cloned().collect())
            }
            TaskParams::AnilFo { init, inner_lr } => {
                let w: Vec<f64> = init.iter().cloned().collect();
                self.anil_inner_step(dataset, &w, *inner_lr)
            }
        }
    }

    /// `c(x) + wᵀ v(x)`.
    pub fn predict(&self, w: &[f64], x: &[f64]) -> Result<f64> {
        self.check_weight(w)?;
        let (v, c) = self.net.forward(x)?;
        Ok(c + dot(w, &v))
    }

    pub fn predict_batch(&self, w: &[f64], inputs: &DMatrix<f64>) -> Result<DVector<f64>> {
        self.check_weight(w)?;
        let out = self.net.forward_batch(inputs)?;
        Ok(out.bias + &out.features * DVector::from_column_slice(w))
    }

    fn check_weight(&self, w: &[f64]) -> Result<()> {
        if w.len() != self.rank() {
            return Err(Error::shape(format!(
                "task weight must have length {}, got {}",
                self.rank(),
                w.len()
            )));
        }
        Ok(())
    }

    /// `ℓ(D; θ, w) = Σ ½ (F(x; θ, w) − y)²`.
    pub fn task_loss(&self, w: &[f64], dataset: &TaskDataset) -> Result<f64> {
        let pred = self.predict_batch(w, dataset.inputs())?;
        Ok(0.5 * (pred - dataset.targets()).norm_squared())
    }

    /// Mean squared error of `F(·; θ, w)` on a dataset.
    pub fn mse(&self, w: &[f64], dataset: &TaskDataset) -> Result<f64> {
        Ok(2.0 * self.task_loss(w, dataset)? / dataset.len() as f64)
    }

    /// `∇_w ℓ(D; θ, w) = Vᵀ (c + V w − y)`.
    pub fn weight_gradient(&self, w: &[f64], dataset: &TaskDataset) -> Result<Vec<f64>> {
        self.check_weight(w)?;
        let out = self.net.forward_batch(dataset.inputs())?;
        let res = &out.bias + &out.features * DVector::from_column_slice(w) - dataset.targets();
        Ok((out.features.transpose() * res).iter().cloned().collect())
    }

    /// `w − α ∇_w ℓ(D; θ, w)`: the ANIL inner step restricted to the head.
    pub fn anil_inner_step(&self, dataset: &TaskDataset, w: &[f64], alpha: f64) -> Result<Vec<f64>> {
        let g = self.weight_gradient(w, dataset)?;
        Ok(w.iter().zip(&g).map(|(wi, gi)| wi - alpha * gi).collect())
    }

    pub fn regularization(&self, reg: RegConfig) -> f64 {
        match &self.task {
            TaskParams::Camel { bank } => reg.lambda * bank.norm_squared(),
            TaskParams::Coda { contexts, .. } => reg.lambda * contexts.iter().map(|v| v.abs()).sum::<f64>(),
            TaskParams::AnilFo { .. } => 0.0,
        }
    }

    /// `L(π) = Σ_t ℓ(D_t; θ, w_t(π)) + R(π)`.
    pub fn meta_loss(&self, meta: &MetaDataset, reg: RegConfig) -> Result<f64> {
        self.check_tasks(meta)?;
        let mut loss = 0.0;
        for (t, task) in meta.tasks().iter().enumerate() {
            let w = self.task_weights(t, task)?;
            loss += self.task_loss(&w, task)?;
        }
        Ok(loss + self.regularization(reg))
    }

    fn check_tasks(&self, meta: &MetaDataset) -> Result<()> {
        if let Some(t) = self.num_tasks() {
            if t != meta.num_tasks() {
                return Err(Error::shape(format!(
                    "model was built for {t} tasks, meta-dataset has {}",
                    meta.num_tasks()
                )));
            }
        }
        Ok(())
    }

    /// Loss and full gradient of the meta-loss. ANIL uses the first-order
    /// approximation: no gradient flows through the inner step.
    pub fn meta_gradient(&self, meta: &MetaDataset, reg: RegConfig) -> Result<MetaGradient> {
        self.check_tasks(meta)?;
        let r = self.rank();
        let n_tasks = meta.num_tasks();
        let mut net_grad = vec![0.0; self.net.len()];
        // gradient of the data term with respect to each task's head weight
        let mut head_grads = DMatrix::zeros(n_tasks, r);
        let mut loss = 0.0;

        let weights: Vec<Vec<f64>> = meta
            .tasks()
            .iter()
            .enumerate()
            .map(|(t, task)| self.task_weights(t, task))
            .collect::<Result<_>>()?;

        if meta.shared_grid() {
            // one forward/backward on the common grid with summed cotangents
            let grid = meta.tasks()[0].inputs();
            let cache = self.net.forward_cached(grid)?;
            let out = self.net.split(&cache);
            let n = grid.nrows();
            let mut d_features = DMatrix::zeros(n, r);
            let mut d_bias = DVector::zeros(n);
            for (t, task) in meta.tasks().iter().enumerate() {
                let w = DVector::from_column_slice(&weights[t]);
                let res = &out.bias + &out.features * &w - task.targets();
                loss += 0.5 * res.norm_squared();
                d_features += &res * w.transpose();
                d_bias += &res;
                head_grads.row_mut(t).copy_from(&(out.features.transpose() * &res).transpose());
            }
            let (g, _) = self.net.backward(&cache, &d_features, Some(&d_bias), false)?;
            net_grad = g;
        } else {
            for (t, task) in meta.tasks().iter().enumerate() {
                let cache = self.net.forward_cached(task.inputs())?;
                let out = self.net.split(&cache);
                let w = DVector::from_column_slice(&weights[t]);
                let res = &out.bias + &out.features * &w - task.targets();
                loss += 0.5 * res.norm_squared();
                let d_features = &res * w.transpose();
                let (g, _) = self.net.backward(&cache, &d_features, Some(&res), false)?;
                for (a, b) in net_grad.iter_mut().zip(&g) {
                    *a += b;
                }
                head_grads.row_mut(t).copy_from(&(out.features.transpose() * &res).transpose());
            }
        }

        loss += self.regularization(reg);
        let task = match &self.task {
            TaskParams::Camel { bank } => {
                let g = head_grads + bank * (2.0 * reg.lambda);
                row_major(&g)
            }
            TaskParams::Coda { hyper, contexts, .. } => {
                let d_base: DVector<f64> = head_grads.row_sum().transpose();
                // dΘ = Σ_t g_t ξ_tᵀ, dξ_t = Θᵀ g_t + λ sign(ξ_t)
                let d_hyper = head_grads.transpose() * contexts;
                let mut d_ctx = &head_grads * hyper;
                d_ctx.zip_apply(contexts, |d, xi| *d += reg.lambda * sign(xi));
                let mut flat: Vec<f64> = d_base.iter().cloned().collect();
                flat.extend(row_major(&d_hyper));
                flat.extend(row_major(&d_ctx));
                flat
            }
            TaskParams::AnilFo { .. } => head_grads.row_sum().iter().cloned().collect(),
        };
        Ok(MetaGradient {
            loss,
            net: net_grad,
            task,
        })
    }

    /// Task-specific meta-parameters flattened row-major:
    /// CAMEL `Ω`; CoDA `w₀, Θ, Ξ`; ANIL `w_init`.
    pub fn task_flat(&self) -> Vec<f64> {
        match &self.task {
            TaskParams::Camel { bank } => row_major(bank),
            TaskParams::Coda { base, hyper, contexts } => {
                let mut v: Vec<f64> = base.iter().cloned().collect();
                v.extend(row_major(hyper));
                v.extend(row_major(contexts));
                v
            }
            TaskParams::AnilFo { init, .. } => init.iter().cloned().collect(),
        }
    }

    pub fn set_task_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.task_flat().len() {
            return Err(Error::shape(format!(
                "expected {} task parameters, got {}",
                self.task_flat().len(),
                values.len()
            )));
        }
        match &mut self.task {
            TaskParams::Camel { bank } => fill_row_major(bank, values),
            TaskParams::Coda { base, hyper, contexts } => {
                let r = base.len();
                base.copy_from_slice(&values[..r]);
                let h = hyper.len();
                fill_row_major(hyper, &values[r..r + h]);
                fill_row_major(contexts, &values[r + h..]);
            }
            TaskParams::AnilFo { init, .. } => init.copy_from_slice(values),
        }
        Ok(())
    }

    /// Writes the model as a network checkpoint whose header also records
    /// the variant and its shape fields; the payload is the network
    /// parameters followed by [`MetaModel::task_flat`].
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.save_with(path, &BTreeMap::new())
    }

    /// [`MetaModel::save`] with additional header fields; reserved keys
    /// written by the model take precedence.
    pub fn save_with(&self, path: impl AsRef<Path>, fields: &BTreeMap<String, String>) -> Result<()> {
        let path = path.as_ref();
        let mut extra = fields.clone();
        extra.insert("variant".to_string(), self.variant().name().to_string());
        match &self.task {
            TaskParams::Camel { bank } => {
                extra.insert("tasks".into(), bank.nrows().to_string());
            }
            TaskParams::Coda { contexts, .. } => {
                extra.insert("tasks".into(), contexts.nrows().to_string());
                extra.insert("xi_dim".into(), contexts.ncols().to_string());
            }
            TaskParams::AnilFo { inner_lr, .. } => {
                extra.insert("inner_lr".into(), format!("{inner_lr:e}"));
            }
        }
        let header = Header {
            arch: self.net.architecture().clone(),
            extra,
        };
        let mut values = self.net.flat().to_vec();
        values.extend(self.task_flat());
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        checkpoint::write_checkpoint(std::io::BufWriter::new(file), &header, &values).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let (header, values) = checkpoint::read_checkpoint(std::io::BufReader::new(file))?;
        Self::from_checkpoint(header, values)
    }

    /// Loads a model together with every header field.
    pub fn load_with(path: impl AsRef<Path>) -> Result<(Self, BTreeMap<String, String>)> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let (header, values) = checkpoint::read_checkpoint(std::io::BufReader::new(file))?;
        let fields = header.extra.clone();
        Ok((Self::from_checkpoint(header, values)?, fields))
    }

    pub fn from_checkpoint(header: Header, values: Vec<f64>) -> Result<Self> {
        let field = |k: &str| -> Result<&String> {
            header
                .extra
                .get(k)
                .ok_or_else(|| Error::Parse(format!("checkpoint header missing '{k}'")))
        };
        let parse_usize = |k: &str| -> Result<usize> {
            field(k)?
                .parse()
                .map_err(|e| Error::Parse(format!("bad '{k}' in checkpoint: {e}")))
        };
        let arch = header.arch.clone();
        let p = arch.param_count();
        let r = arch.rank();
        if values.len() < p {
            return Err(Error::Parse("checkpoint payload shorter than the network".into()));
        }
        let variant: Variant = field("variant")
            .map(|s| s.as_str())
            .unwrap_or("camel")
            .parse()?;
        let rest = &values[p..];
        let task = match variant {
            Variant::Camel => {
                let t = parse_usize("tasks")?;
                let mut bank = DMatrix::zeros(t, r);
                check_len(rest, t * r)?;
                fill_row_major(&mut bank, rest);
                TaskParams::Camel { bank }
            }
            Variant::Coda => {
                let t = parse_usize("tasks")?;
                let d = parse_usize("xi_dim")?;
                check_len(rest, r + r * d + t * d)?;
                let mut hyper = DMatrix::zeros(r, d);
                let mut contexts = DMatrix::zeros(t, d);
                fill_row_major(&mut hyper, &rest[r..r + r * d]);
                fill_row_major(&mut contexts, &rest[r + r * d..]);
                TaskParams::Coda {
                    base: DVector::from_column_slice(&rest[..r]),
                    hyper,
                    contexts,
                }
            }
            Variant::AnilFo => {
                check_len(rest, r)?;
                let inner_lr = field("inner_lr")?
                    .parse()
                    .map_err(|e| Error::Parse(format!("bad inner_lr: {e}")))?;
                TaskParams::AnilFo {
                    init: DVector::from_column_slice(rest),
                    inner_lr,
                }
            }
        };
        let net = NetworkParams::from_flat(arch, values[..p].to_vec())?;
        Self::from_parts(net, task)
    }
}

fn check_len(rest: &[f64], expected: usize) -> Result<()> {
    if rest.len() != expected {
        return Err(Error::Parse(format!(
            "checkpoint task payload has {} values, expected {expected}",
            rest.len()
        )));
    }
    Ok(())
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

fn fill_row_major(m: &mut DMatrix<f64>, values: &[f64]) {
    let cols = m.ncols();
    for (idx, v) in values.iter().enumerate() {
        m[(idx / cols, idx % cols)] = *v;
    }
}
