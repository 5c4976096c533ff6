use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use super::dataset::{MetaDataset, TaskDataset};
use crate::error::{Error, Result};

/// Fixed preprocessing between raw physical data and the network:
/// `x' = (x − μ) / σ` per input dimension and `y' = y / s`.
///
/// Targets are only scaled, never shifted, so a context-linear system stays
/// context-linear after normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub input_mean: Vec<f64>,
    pub input_scale: Vec<f64>,
    pub target_scale: f64,
}

impl Normalizer {
    pub fn identity(input_dim: usize) -> Self {
        Self {
            input_mean: vec![0.0; input_dim],
            input_scale: vec![1.0; input_dim],
            target_scale: 1.0,
        }
    }

    /// Statistics of the pooled training data. `standardize_inputs` off
    /// keeps the inputs untouched; the target scale is the RMS target.
    pub fn fit(meta: &MetaDataset, standardize_inputs: bool) -> Self {
        let d = meta.input_dim();
        let total = meta.total_samples() as f64;
        let mut mean = vec![0.0; d];
        let mut sq = vec![0.0; d];
        let mut y2 = 0.0;
        for task in meta.tasks() {
            for (j, col) in task.inputs().column_iter().enumerate() {
                mean[j] += col.sum();
                sq[j] += col.norm_squared();
            }
            y2 += task.targets().norm_squared();
        }
        let mut out = Self::identity(d);
        if standardize_inputs {
            for j in 0..d {
                let m = mean[j] / total;
                let var = (sq[j] / total - m * m).max(0.0);
                out.input_mean[j] = m;
                out.input_scale[j] = if var > 1e-24 { var.sqrt() } else { 1.0 };
            }
        }
        let rms = (y2 / total).sqrt();
        out.target_scale = if rms > 0.0 && rms.is_finite() { rms } else { 1.0 };
        out
    }

    pub fn input(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.input_mean)
            .zip(&self.input_scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    pub fn inputs(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.input_mean.len() {
            return Err(Error::shape(format!(
                "normalizer expects {} inputs, got {}",
                self.input_mean.len(),
                x.ncols()
            )));
        }
        Ok(DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| {
            (x[(i, j)] - self.input_mean[j]) / self.input_scale[j]
        }))
    }

    pub fn task(&self, task: &TaskDataset) -> Result<TaskDataset> {
        let targets: DVector<f64> = task.targets() / self.target_scale;
        TaskDataset::new(
            self.inputs(task.inputs())?,
            targets,
            task.context().map(|c| c.to_vec()),
        )
    }

    pub fn meta(&self, meta: &MetaDataset) -> Result<MetaDataset> {
        let tasks = meta.tasks().iter().map(|t| self.task(t)).collect::<Result<Vec<_>>>()?;
        MetaDataset::new(tasks, meta.shared_grid())
    }

    /// Converts a normalized output back to physical units.
    pub fn output(&self, y: f64) -> f64 {
        y * self.target_scale
    }

    pub fn to_fields(&self) -> BTreeMap<String, String> {
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(",");
        let mut m = BTreeMap::new();
        m.insert("input_mean".into(), join(&self.input_mean));
        m.insert("input_scale".into(), join(&self.input_scale));
        m.insert("target_scale".into(), format!("{:e}", self.target_scale));
        m
    }

    /// Inverse of [`Normalizer::to_fields`]; `None` when the fields are absent.
    pub fn from_fields(fields: &BTreeMap<String, String>) -> Result<Option<Self>> {
        let (Some(mean), Some(scale), Some(ts)) = (
            fields.get("input_mean"),
            fields.get("input_scale"),
            fields.get("target_scale"),
        ) else {
            return Ok(None);
        };
        let parse = |s: &str| -> Result<Vec<f64>> {
            if s.is_empty() {
                return Ok(Vec::new());
            }
            s.split(',')
                .map(|v| v.parse::<f64>().map_err(|e| Error::Parse(format!("bad normalizer value '{v}': {e}"))))
                .collect()
        };
        let out = Self {
            input_mean: parse(mean)?,
            input_scale: parse(scale)?,
            target_scale: ts
                .parse()
                .map_err(|e| Error::Parse(format!("bad target scale '{ts}': {e}")))?,
        };
        if out.input_mean.len() != out.input_scale.len() || out.input_scale.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Parse("inconsistent normalizer fields".into()));
        }
        Ok(Some(out))
    }
}
