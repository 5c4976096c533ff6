use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Samples `(x_i, y_i)` from one environment, optionally annotated with the
/// environment's physical context.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    inputs: DMatrix<f64>,
    targets: DVector<f64>,
    context: Option<Vec<f64>>,
}

impl TaskDataset {
    pub fn new(inputs: DMatrix<f64>, targets: DVector<f64>, context: Option<Vec<f64>>) -> Result<Self> {
        if inputs.nrows() == 0 {
            return Err(Error::shape("task dataset must contain at least one sample"));
        }
        if inputs.nrows() != targets.len() {
            return Err(Error::shape(format!(
                "{} input rows but {} targets",
                inputs.nrows(),
                targets.len()
            )));
        }
        if inputs.iter().any(|v| !v.is_finite()) {
            return Err(Error::shape("task inputs contain non-finite values"));
        }
        Ok(Self {
            inputs,
            targets,
            context,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>], targets: &[f64], context: Option<Vec<f64>>) -> Result<Self> {
        let dim = rows.first().map_or(0, |r| r.len());
        let inputs = crate::nn::rows_to_matrix(rows, dim)?;
        Self::new(inputs, DVector::from_column_slice(targets), context)
    }

    pub fn inputs(&self) -> &DMatrix<f64> {
        &self.inputs
    }

    pub fn targets(&self) -> &DVector<f64> {
        &self.targets
    }

    pub fn context(&self) -> Option<&[f64]> {
        self.context.as_deref()
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn input(&self, i: usize) -> Vec<f64> {
        self.inputs.row(i).iter().cloned().collect()
    }

    /// Rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::shape(format!("sample index {bad} out of range {}", self.len())));
        }
        let inputs = self.inputs.select_rows(indices);
        let targets = DVector::from_iterator(indices.len(), indices.iter().map(|&i| self.targets[i]));
        Self::new(inputs, targets, self.context.clone())
    }

    /// First `k` samples.
    pub fn prefix(&self, k: usize) -> Result<Self> {
        let idx: Vec<usize> = (0..k.min(self.len())).collect();
        self.select(&idx)
    }

    pub fn with_targets(&self, targets: DVector<f64>) -> Result<Self> {
        Self::new(self.inputs.clone(), targets, self.context.clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaDataset {
    tasks: Vec<TaskDataset>,
    shared_grid: bool,
}

impl MetaDataset {
    pub fn new(tasks: Vec<TaskDataset>, shared_grid: bool) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::shape("meta-dataset needs at least one task"));
        }
        let dim = tasks[0].input_dim();
        if tasks.iter().any(|t| t.input_dim() != dim) {
            return Err(Error::shape("tasks disagree on input dimension"));
        }
        let ctx_dims: Vec<usize> = tasks.iter().filter_map(|t| t.context().map(|c| c.len())).collect();
        if ctx_dims.windows(2).any(|w| w[0] != w[1]) {
            return Err(Error::shape("task contexts have different dimensions"));
        }
        if shared_grid && tasks.iter().any(|t| t.inputs() != tasks[0].inputs()) {
            return Err(Error::shape("shared-grid flag set but task inputs differ"));
        }
        Ok(Self { tasks, shared_grid })
    }

    pub fn tasks(&self) -> &[TaskDataset] {
        &self.tasks
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn shared_grid(&self) -> bool {
        self.shared_grid
    }

    pub fn input_dim(&self) -> usize {
        self.tasks[0].input_dim()
    }

    /// Stacked contexts `T x n`, if every task carries one.
    pub fn contexts(&self) -> Option<DMatrix<f64>> {
        let ctx: Option<Vec<&[f64]>> = self.tasks.iter().map(|t| t.context()).collect();
        let ctx = ctx?;
        let n = ctx[0].len();
        Some(DMatrix::from_fn(ctx.len(), n, |t, j| ctx[t][j]))
    }

    pub fn total_samples(&self) -> usize {
        self.tasks.iter().map(|t| t.len()).sum()
    }

    /// Tasks reordered by `order`; the shared-grid flag is kept.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let tasks = order
            .iter()
            .map(|&i| {
                self.tasks
                    .get(i)
                    .cloned()
                    .ok_or_else(|| Error::shape(format!("task index {i} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(tasks, self.shared_grid)
    }
}
