//! Context sampling and dataset construction for field systems.

use nalgebra::{DMatrix, DVector};
use rand::distributions::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;

use super::PhysicalSystem;
use crate::error::{Error, Result};
use crate::meta::{MetaDataset, TaskDataset};

/// Regular grid with `counts[d]` points per axis, endpoints included,
/// first axis varying fastest.
pub fn grid_points(lo: &[f64], hi: &[f64], counts: &[usize]) -> Vec<Vec<f64>> {
    let dims = counts.len();
    let total: usize = counts.iter().product();
    (0..total)
        .map(|mut idx| {
            (0..dims)
                .map(|d| {
                    let k = idx % counts[d];
                    idx /= counts[d];
                    if counts[d] == 1 {
                        0.5 * (lo[d] + hi[d])
                    } else {
                        lo[d] + (hi[d] - lo[d]) * k as f64 / (counts[d] - 1) as f64
                    }
                })
                .collect()
        })
        .collect()
}

/// How task contexts are drawn.
#[derive(Debug, Clone, PartialEq)]
pub enum ContextSampler {
    /// Independent uniform draws in a box.
    Uniform { low: Vec<f64>, high: Vec<f64> },
    /// Cartesian product of per-dimension value lists.
    Product(Vec<Vec<f64>>),
    /// Explicit list.
    Fixed(Vec<Vec<f64>>),
}

impl ContextSampler {
    pub fn dim(&self) -> usize {
        match self {
            ContextSampler::Uniform { low, .. } => low.len(),
            ContextSampler::Product(levels) => levels.len(),
            ContextSampler::Fixed(list) => list.first().map_or(0, |c| c.len()),
        }
    }

    /// `count` is ignored by the enumerating samplers.
    pub fn sample<R: Rng>(&self, count: usize, rng: &mut R) -> Result<Vec<Vec<f64>>> {
        match self {
            ContextSampler::Uniform { low, high } => {
                if low.len() != high.len() || low.iter().zip(high).any(|(l, h)| l > h) {
                    return Err(Error::config("uniform context bounds are inconsistent"));
                }
                Ok((0..count)
                    .map(|_| {
                        low.iter()
                            .zip(high)
                            .map(|(&l, &h)| if l == h { l } else { rng.gen_range(l..h) })
                            .collect()
                    })
                    .collect())
            }
            ContextSampler::Product(levels) => {
                let counts: Vec<usize> = levels.iter().map(|l| l.len()).collect();
                let total: usize = counts.iter().product();
                Ok((0..total)
                    .map(|mut idx| {
                        levels
                            .iter()
                            .map(|lv| {
                                let v = lv[idx % lv.len()];
                                idx /= lv.len();
                                v
                            })
                            .collect()
                    })
                    .collect())
            }
            ContextSampler::Fixed(list) => Ok(list.clone()),
        }
    }
}

/// Where the probe inputs of each task come from.
#[derive(Debug, Clone, PartialEq)]
pub enum SamplingSpec {
    /// The same regular grid for every task.
    Grid { lo: Vec<f64>, hi: Vec<f64>, counts: Vec<usize> },
    /// `count` independent uniform points per task.
    Uniform { lo: Vec<f64>, hi: Vec<f64>, count: usize },
}

impl SamplingSpec {
    pub fn points<R: Rng>(&self, rng: &mut R) -> Vec<Vec<f64>> {
        match self {
            SamplingSpec::Grid { lo, hi, counts } => grid_points(lo, hi, counts),
            SamplingSpec::Uniform { lo, hi, count } => (0..*count)
                .map(|_| lo.iter().zip(hi).map(|(&l, &h)| rng.gen_range(l..h)).collect())
                .collect(),
        }
    }

    pub fn is_shared(&self) -> bool {
        matches!(self, SamplingSpec::Grid { .. })
    }
}

/// Adds `N(0, σ²)` to every target; a no-op for `σ = 0`.
pub fn add_noise<R: Rng>(targets: &mut DVector<f64>, sigma: f64, rng: &mut R) -> Result<()> {
    if sigma == 0.0 {
        return Ok(());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::config(format!("noise level: {e}")))?;
    for y in targets.iter_mut() {
        *y += normal.sample(rng);
    }
    Ok(())
}

/// Evaluates `system` at each context over the sampled inputs. `noise`
/// perturbs the targets; callers pass zero for training data.
pub fn build_meta_dataset(
    system: &dyn PhysicalSystem,
    contexts: &[Vec<f64>],
    spec: &SamplingSpec,
    noise: f64,
    seed: u64,
) -> Result<MetaDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shared = spec.is_shared();
    let grid = if shared { Some(spec.points(&mut rng)) } else { None };
    let mut tasks = Vec::with_capacity(contexts.len());
    for ctx in contexts {
        if ctx.len() != system.context_dim() {
            return Err(Error::shape(format!(
                "{} expects contexts of length {}, got {}",
                system.name(),
                system.context_dim(),
                ctx.len()
            )));
        }
        let points = match &grid {
            Some(g) => g.clone(),
            None => spec.points(&mut rng),
        };
        let task = evaluate_task(system, ctx, &points, noise, &mut rng)?;
        tasks.push(task);
    }
    MetaDataset::new(tasks, shared)
}

pub fn evaluate_task<R: Rng>(
    system: &dyn PhysicalSystem,
    context: &[f64],
    points: &[Vec<f64>],
    noise: f64,
    rng: &mut R,
) -> Result<TaskDataset> {
    let d = system.input_dim();
    let inputs = DMatrix::from_fn(points.len(), d, |i, j| points[i][j]);
    let mut targets = DVector::zeros(points.len());
    for (i, p) in points.iter().enumerate() {
        targets[i] = system.evaluate(context, p)?;
    }
    add_noise(&mut targets, noise, rng)?;
    TaskDataset::new(inputs, targets, Some(context.to_vec()))
}

/// Uniform draws that keep at least `min_dist` from every point in `avoid`.
pub fn uniform_points_avoiding<R: Rng>(
    lo: &[f64],
    hi: &[f64],
    count: usize,
    avoid: &[[f64; 2]],
    min_dist: f64,
    rng: &mut R,
) -> Vec<Vec<f64>> {
    let dists: Vec<Uniform<f64>> = lo.iter().zip(hi).map(|(&l, &h)| Uniform::new(l, h)).collect();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let p: Vec<f64> = dists.iter().map(|d| d.sample(rng)).collect();
        let ok = avoid
            .iter()
            .all(|c| ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)).sqrt() >= min_dist);
        if ok {
            out.push(p);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::ChargeSystem;

    #[test]
    fn grid_has_endpoints() {
        let g = grid_points(&[-1.0, 0.0], &[1.0, 1.0], &[3, 2]);
        assert_eq!(g.len(), 6);
        assert_eq!(g[0], vec![-1.0, 0.0]);
        assert_eq!(g[2], vec![1.0, 0.0]);
        assert_eq!(g[5], vec![1.0, 1.0]);
    }

    #[test]
    fn charges_meta_dataset_shape() {
        let sys = ChargeSystem::dipolar();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let sampler = ContextSampler::Uniform {
            low: vec![1.0; 3],
            high: vec![5.0; 3],
        };
        let ctx = sampler.sample(10, &mut rng).unwrap();
        let (lo, hi) = ChargeSystem::domain();
        let spec = SamplingSpec::Grid {
            lo: lo.to_vec(),
            hi: hi.to_vec(),
            counts: vec![20, 20],
        };
        let meta = build_meta_dataset(&sys, &ctx, &spec, 0.0, 1).unwrap();
        assert_eq!(meta.num_tasks(), 10);
        assert!(meta.tasks().iter().all(|t| t.len() == 400));
        assert!(meta.shared_grid());
        assert!(meta
            .contexts()
            .unwrap()
            .iter()
            .all(|&c| (1.0..=5.0).contains(&c)));
    }

    #[test]
    fn product_sampler_enumerates() {
        let s = ContextSampler::Product(vec![vec![1.0, 2.0], vec![0.2, 0.5]]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = s.sample(0, &mut rng).unwrap();
        assert_eq!(c.len(), 4);
        assert!(c.contains(&vec![2.0, 0.5]));
    }

    #[test]
    fn rebuild_is_bit_identical() {
        let sys = ChargeSystem::dipolar();
        let ctx = vec![vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 1.0]];
        let spec = SamplingSpec::Uniform {
            lo: vec![-1.0, 0.0],
            hi: vec![1.0, 1.0],
            count: 50,
        };
        let a = build_meta_dataset(&sys, &ctx, &spec, 0.0, 5).unwrap();
        let b = build_meta_dataset(&sys, &ctx, &spec, 0.0, 5).unwrap();
        assert_eq!(a, b);
        assert!(!a.shared_grid());
        let noisy = build_meta_dataset(&sys, &ctx, &spec, 0.1, 5).unwrap();
        assert_ne!(a, noisy);
    }
}
