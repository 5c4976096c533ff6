//! End-to-end experiment pipelines driven by an [`ExperimentConfig`]:
//! generate → train → adapt on fresh environments → identify → emit CSVs.
//!
//! Every random draw comes from a named sub-stream of the root seed, so
//! data, initialization and evaluation can be reproduced independently.
//! Emitted result files are byte-identical across runs with the same
//! config and seed; wall-clock measurements go to separate timing files.

mod config;
mod emit;

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub use config::*;
pub use emit::{write_dataset_csv, CsvEmitter};

use crate::adaptation::{adapt, ols_adapt, zero_shot_weights, GradientAdaptConfig};
use crate::control::{
    load_trajectory, swing_up_target, track_adaptive, track_fixed, track_fixed_learned, AnalyticFeedforward,
    FeedbackAxes, LearnedDynamics, SwingUpConfig, TrackingConfig, TrackingReport,
};
use crate::error::{Error, Result};
use crate::identification::{
    estimate_context, fit_identification, fit_inverse, relative_error, IdentificationMap, InverseContextMap,
    PropositionDiagnostics,
};
use crate::meta::{train, MetaDataset, MetaModel, Normalizer, RegConfig, TaskDataset, TrainConfig, Variant};
use crate::nn::{Activation, Architecture};
use crate::systems::charges::MIN_PROBE_DISTANCE;
use crate::systems::dataset::{build_meta_dataset, evaluate_task, uniform_points_avoiding};
use crate::systems::manipulator::{build_trajectory_dataset, sinusoidal_task, TrajectorySpec};
use crate::systems::{
    CapacitorProblem, ChargeSystem, Manipulator, ManipulatorSystem, PhysicalSystem, SyntheticLinearSystem, Trajectory,
};

/// Deterministic 64-bit seed of the sub-stream `stream` of `root`.
pub fn sub_seed(root: u64, stream: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(stream.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

/// Capacitor indexed by the unscaled misalignment `φ`; evaluates at `ε φ`.
struct ScaledCapacitor {
    problem: CapacitorProblem,
}

impl PhysicalSystem for ScaledCapacitor {
    fn name(&self) -> &str {
        "capacitor"
    }
    fn context_dim(&self) -> usize {
        2
    }
    fn input_dim(&self) -> usize {
        2
    }
    fn evaluate(&self, context: &[f64], x: &[f64]) -> Result<f64> {
        if context.len() != 2 {
            return Err(Error::shape("capacitor contexts are 2-D"));
        }
        let eps = self.problem.epsilon;
        self.problem.evaluate(&[eps * context[0], eps * context[1]], x)
    }
}

enum Plant {
    Field {
        system: Box<dyn PhysicalSystem>,
        avoid: Vec<[f64; 2]>,
    },
    Manipulator {
        system: ManipulatorSystem,
        spec: TrajectorySpec,
    },
}

/// A constructed ground-truth system together with its probe domain.
pub struct Environment {
    plant: Plant,
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl Environment {
    pub fn build(cfg: &ExperimentConfig) -> Result<Self> {
        let sys = &cfg.system;
        let box_of = |cfg: &ExperimentConfig| {
            (
                cfg.evaluation.lo.clone().unwrap_or_else(|| cfg.data.lo.clone()),
                cfg.evaluation.hi.clone().unwrap_or_else(|| cfg.data.hi.clone()),
            )
        };
        let env = match sys.kind.as_str() {
            "charges" => {
                let system = ChargeSystem::dipolar();
                let avoid = system.locations().to_vec();
                let (lo, hi) = box_of(cfg);
                Environment {
                    plant: Plant::Field {
                        system: Box::new(system),
                        avoid,
                    },
                    lo,
                    hi,
                }
            }
            "capacitor" => {
                let geometry = sys.capacitor.clone().unwrap_or_default().geometry();
                let problem = CapacitorProblem::new(geometry, sys.epsilon.unwrap_or(1.0))?;
                let (lo, hi) = box_of(cfg);
                Environment {
                    plant: Plant::Field {
                        system: Box::new(ScaledCapacitor { problem }),
                        avoid: Vec::new(),
                    },
                    lo,
                    hi,
                }
            }
            "synthetic" => {
                let s = sys.synthetic.as_ref().expect("validated");
                let system = SyntheticLinearSystem::new(s.input_dim, s.hidden, s.context_dim, s.offset, s.seed)?;
                let (lo, hi) = box_of(cfg);
                Environment {
                    plant: Plant::Field {
                        system: Box::new(system),
                        avoid: Vec::new(),
                    },
                    lo,
                    hi,
                }
            }
            name => {
                let mut system = ManipulatorSystem::by_name(name)?;
                if let Some(b) = sys.friction {
                    system = system.with_friction(b);
                }
                Environment {
                    plant: Plant::Manipulator {
                        system,
                        spec: cfg.data.trajectory_spec(),
                    },
                    lo: Vec::new(),
                    hi: Vec::new(),
                }
            }
        };
        Ok(env)
    }

    pub fn manipulator(&self) -> Option<&ManipulatorSystem> {
        match &self.plant {
            Plant::Manipulator { system, .. } => Some(system),
            Plant::Field { .. } => None,
        }
    }

    pub fn context_dim(&self) -> usize {
        match &self.plant {
            Plant::Field { system, .. } => system.context_dim(),
            Plant::Manipulator { .. } => 2,
        }
    }

    pub fn input_dim(&self) -> usize {
        match &self.plant {
            Plant::Field { system, .. } => system.input_dim(),
            Plant::Manipulator { system, .. } => 3 * system.dof(),
        }
    }

    /// Noiseless or noisy training meta-dataset in physical units.
    pub fn training_data(&self, cfg: &ExperimentConfig, contexts: &[Vec<f64>], seed: u64) -> Result<MetaDataset> {
        match &self.plant {
            Plant::Field { system, .. } => {
                build_meta_dataset(system.as_ref(), contexts, &cfg.data.sampling()?, cfg.data.noise, seed)
            }
            Plant::Manipulator { system, spec } => build_trajectory_dataset(system, contexts, spec, cfg.data.noise, seed),
        }
    }

    /// Adaptation shots and noiseless held-out points for one test context.
    /// Every prefix of the shots is a valid smaller shot set: i.i.d. probes
    /// for fields, the opening steps of the trajectory for manipulators.
    pub fn test_task<R: Rng>(
        &self,
        context: &[f64],
        shots: usize,
        held_out: usize,
        noise: f64,
        rng: &mut R,
    ) -> Result<(TaskDataset, TaskDataset)> {
        match &self.plant {
            Plant::Field { system, avoid } => {
                let s = uniform_points_avoiding(&self.lo, &self.hi, shots, avoid, MIN_PROBE_DISTANCE, rng);
                let h = uniform_points_avoiding(&self.lo, &self.hi, held_out, avoid, MIN_PROBE_DISTANCE, rng);
                let shot_task = evaluate_task(system.as_ref(), context, &s, noise, rng)?;
                let held_task = evaluate_task(system.as_ref(), context, &h, 0.0, rng)?;
                Ok((shot_task, held_task))
            }
            Plant::Manipulator { system, spec } => {
                // one trajectory: the first `shots` steps adapt, the rest is held out
                let one = TrajectorySpec {
                    trajectories: 1,
                    length: shots + held_out,
                    ..spec.clone()
                };
                let (traj, _) = sinusoidal_task(system, context, &one, rng)?;
                let idx: Vec<usize> = (0..traj.len()).collect();
                let mut shot_task = traj.select(&idx[..shots])?;
                if noise > 0.0 {
                    let mut y = shot_task.targets().clone();
                    crate::systems::dataset::add_noise(&mut y, noise, rng)?;
                    shot_task = shot_task.with_targets(y)?;
                }
                let held_task = traj.select(&idx[shots..])?;
                Ok((shot_task, held_task))
            }
        }
    }
}

pub fn sample_contexts(sampler: &SamplerConfig, count: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sampler.sampler()?.sample(count, &mut rng)
}

/// Training contexts and the raw training meta-dataset.
pub struct Generated {
    pub contexts: Vec<Vec<f64>>,
    pub data: MetaDataset,
}

pub fn generate(cfg: &ExperimentConfig, env: &Environment) -> Result<Generated> {
    let contexts = sample_contexts(&cfg.contexts.train, cfg.contexts.train.count, sub_seed(cfg.seed, "contexts"))?;
    if contexts.iter().any(|c| c.len() != env.context_dim()) {
        return Err(Error::config(format!("contexts must have dimension {}", env.context_dim())));
    }
    let data = env.training_data(cfg, &contexts, sub_seed(cfg.seed, "data"))?;
    Ok(Generated { contexts, data })
}

pub fn test_contexts(cfg: &ExperimentConfig) -> Result<Vec<Vec<f64>>> {
    let sampler = cfg.contexts.test.as_ref().unwrap_or(&cfg.contexts.train);
    let mut contexts = sample_contexts(sampler, cfg.evaluation.trials, sub_seed(cfg.seed, "test-contexts"))?;
    contexts.truncate(cfg.evaluation.trials);
    if contexts.len() < cfg.evaluation.trials {
        return Err(Error::config(format!(
            "test sampler yields {} contexts, {} trials requested",
            contexts.len(),
            cfg.evaluation.trials
        )));
    }
    Ok(contexts)
}

/// A trained model with its preprocessing and training statistics.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub variant: Variant,
    pub dynamics: LearnedDynamics,
    pub history: Vec<f64>,
    pub train_seconds: f64,
}

impl TrainedModel {
    pub fn model(&self) -> &MetaModel {
        &self.dynamics.model
    }

    pub fn normalizer(&self) -> &Normalizer {
        &self.dynamics.normalizer
    }

    pub fn seconds_per_step(&self) -> f64 {
        self.train_seconds / self.history.len().max(1) as f64
    }

    /// Saves the model with its normalizer and the tag of the run that produced it.
    pub fn save(&self, path: impl AsRef<Path>, tag: &str) -> Result<()> {
        let mut fields = self.normalizer().to_fields();
        fields.insert("run".into(), tag.to_string());
        fields.insert("seconds_per_step".into(), format!("{:e}", self.seconds_per_step()));
        self.model().save_with(path, &fields)
    }

    /// Loads a checkpoint and returns it with its run tag, if any.
    pub fn load(path: impl AsRef<Path>) -> Result<(Self, Option<String>)> {
        let (model, fields) = MetaModel::load_with(path)?;
        let normalizer =
            Normalizer::from_fields(&fields)?.unwrap_or_else(|| Normalizer::identity(model.net().input_dim()));
        let per_step = match fields.get("seconds_per_step") {
            Some(v) => v.parse().map_err(|_| Error::Parse(format!("bad seconds_per_step '{v}'")))?,
            None => 0.0,
        };
        let trained = Self {
            variant: model.variant(),
            dynamics: LearnedDynamics::new(model, normalizer)?,
            history: Vec::new(),
            train_seconds: per_step,
        };
        Ok((trained, fields.get("run").cloned()))
    }
}

/// Tag identifying the config and seed a checkpoint was trained under.
/// Identifies a trained model: the seed and every setting that reaches the
/// data or the training loop. Evaluation, control and bench settings are
/// left out, so editing them keeps the checkpoints.
pub fn run_tag(cfg: &ExperimentConfig) -> String {
    let model = ModelConfig {
        variants: Vec::new(),
        ..cfg.model.clone()
    };
    let text = format!("{:?}|{:?}|{:?}|{model:?}|{:?}", cfg.system, cfg.contexts.train, cfg.data, cfg.training);
    let digest = Sha256::digest(text.as_bytes());
    let hex: String = digest[..8].iter().map(|b| format!("{b:02x}")).collect();
    format!("{hex}:{}", cfg.seed)
}

pub fn checkpoint_path(dir: &Path, variant: Variant) -> std::path::PathBuf {
    dir.join(format!("model_{}.ckpt", variant.name()))
}

/// Reuses checkpoints in `dir` that were trained under the same config and
/// seed; trains (and saves) the others.
pub fn load_or_train(cfg: &ExperimentConfig, data: &MetaDataset, dir: Option<&Path>) -> Result<Vec<TrainedModel>> {
    let tag = run_tag(cfg);
    let mut out = Vec::new();
    for variant in cfg.model.parsed_variants()? {
        if let Some(d) = dir {
            let path = checkpoint_path(d, variant);
            if path.exists() {
                let (m, t) = TrainedModel::load(&path)?;
                if t.as_deref() == Some(tag.as_str()) && m.variant == variant {
                    log::info!("reusing {}", path.display());
                    out.push(m);
                    continue;
                }
                log::warn!("{} was trained under another config; retraining", path.display());
            }
        }
        let m = train_variant(cfg, variant, data).map_err(|e| stage("train", e))?;
        if let Some(d) = dir {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            m.save(checkpoint_path(d, variant), &tag)?;
        }
        out.push(m);
    }
    Ok(out)
}

pub fn normalizer_for(cfg: &ExperimentConfig, data: &MetaDataset) -> Normalizer {
    let mut n = Normalizer::fit(data, cfg.training.normalize_inputs);
    if !cfg.training.scale_targets {
        n.target_scale = 1.0;
    }
    n
}

pub fn train_config(cfg: &ExperimentConfig, variant: Variant) -> TrainConfig {
    let t = &cfg.training;
    TrainConfig {
        steps: t.steps,
        learning_rate: t.learning_rate,
        final_learning_rate: t.final_learning_rate.unwrap_or(t.learning_rate),
        reg: RegConfig { lambda: t.lambda },
        target_loss: t.target_loss,
        refine_steps: if variant == Variant::Camel { t.refine_steps } else { 0 },
    }
}

pub fn train_variant(cfg: &ExperimentConfig, variant: Variant, data: &MetaDataset) -> Result<TrainedModel> {
    let normalizer = normalizer_for(cfg, data);
    let meta = normalizer.meta(data)?;
    let arch = Architecture::new(cfg.model.layer_sizes(data.input_dim()), Activation::Tanh, cfg.model.bias_head)?;
    let mut model = MetaModel::new(variant, arch, meta.num_tasks(), sub_seed(cfg.seed, "init"), cfg.model.inner_lr)?;
    if variant == Variant::Camel && cfg.training.bank_init > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, "init-bank"));
        let a = cfg.training.bank_init;
        let bank: Vec<f64> = model.task_flat().iter().map(|_| rng.gen_range(-a..a)).collect();
        model.set_task_flat(&bank)?;
    }
    let start = Instant::now();
    let outcome = train(&model, &meta, &train_config(cfg, variant))?;
    let train_seconds = start.elapsed().as_secs_f64();
    log::info!(
        "trained {} in {train_seconds:.1}s, final meta-loss {:.3e}",
        variant.label(),
        outcome.final_loss
    );
    Ok(TrainedModel {
        variant,
        dynamics: LearnedDynamics::new(outcome.model, normalizer)?,
        history: outcome.history,
        train_seconds,
    })
}

/// Identification and inverse maps fitted on the training bank of a CAMEL model.
#[derive(Debug, Clone)]
pub struct ContextMaps {
    pub forward: IdentificationMap,
    pub inverse: InverseContextMap,
}

pub fn fit_context_maps(
    trained: &TrainedModel,
    data: &MetaDataset,
    contexts: &[Vec<f64>],
    affine: bool,
) -> Result<ContextMaps> {
    let meta = trained.normalizer().meta(data)?;
    let bank = trained.model().weight_bank(&meta)?;
    let c = crate::linalg::matrix_from_rows(contexts)?;
    Ok(ContextMaps {
        forward: fit_identification(&bank, &c, affine)?,
        inverse: fit_inverse(&c, &bank, affine)?,
    })
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self { mean: f64::NAN, std: f64::NAN };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

/// One method's row of the adaptation table.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRecord {
    pub method: String,
    /// `(shots, MSE)` per configured shot count.
    pub mse: Vec<(usize, Stat)>,
    pub identification: Option<Stat>,
    pub trials: usize,
    pub train_seconds_per_step: f64,
    /// Median wall-clock of one adaptation at the largest shot count.
    pub adapt_seconds: f64,
}

/// Per-environment outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialRow {
    pub trial: usize,
    pub method: String,
    pub context: Vec<f64>,
    pub mse: Vec<f64>,
    pub phi_hat: Option<Vec<f64>>,
    pub identification_error: Option<f64>,
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn gradient_config(cfg: &ExperimentConfig) -> GradientAdaptConfig {
    GradientAdaptConfig {
        steps: cfg.adaptation.gradient_steps,
        learning_rate: cfg.adaptation.gradient_learning_rate,
    }
}

/// MSE of `w` on held-out data, in physical units.
fn physical_mse(trained: &TrainedModel, w: &[f64], held: &TaskDataset) -> Result<f64> {
    let s = trained.normalizer().target_scale;
    Ok(s * s * trained.model().mse(w, &trained.normalizer().task(held)?)?)
}

/// Evaluation results of one or more trained models.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub records: Vec<BenchRecord>,
    pub rows: Vec<TrialRow>,
}

/// Adapts every model on the same test environments. `maps` enables
/// identification for CAMEL models and the zero-shot φ-CAMEL row.
pub fn evaluate_models(
    cfg: &ExperimentConfig,
    env: &Environment,
    models: &[TrainedModel],
    maps: Option<&ContextMaps>,
) -> Result<Evaluation> {
    let contexts = test_contexts(cfg)?;
    let shots = &cfg.adaptation.shots;
    let max_shots = *shots.iter().max().expect("validated");
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, "eval"));
    let tasks = contexts
        .iter()
        .map(|c| env.test_task(c, max_shots, cfg.evaluation.held_out, cfg.evaluation.noise, &mut rng))
        .collect::<Result<Vec<_>>>()?;

    let mut records = Vec::new();
    let mut rows = Vec::new();
    for trained in models {
        let mut per_shot: Vec<Vec<f64>> = vec![Vec::new(); shots.len()];
        let mut id_errors = Vec::new();
        let mut timings = Vec::new();
        for (trial, ((shot_task, held), ctx)) in tasks.iter().zip(&contexts).enumerate() {
            let norm_shots = trained.normalizer().task(shot_task)?;
            let mut mse = Vec::with_capacity(shots.len());
            let mut last_w = Vec::new();
            for (j, &k) in shots.iter().enumerate() {
                let subset = norm_shots.prefix(k)?;
                let start = Instant::now();
                let res = adapt(trained.model(), &subset, cfg.adaptation.ridge, gradient_config(cfg))?;
                if k == max_shots {
                    timings.push(start.elapsed().as_secs_f64());
                    last_w = res.w.clone();
                }
                let e = physical_mse(trained, &res.w, held)?;
                per_shot[j].push(e);
                mse.push(e);
            }
            let (phi_hat, id_err) = match (maps, trained.variant) {
                (Some(m), Variant::Camel) => {
                    let p = estimate_context(&m.forward, &last_w)?;
                    let e = relative_error(&p, ctx);
                    id_errors.push(e);
                    (Some(p), Some(e))
                }
                _ => (None, None),
            };
            rows.push(TrialRow {
                trial,
                method: trained.variant.label().to_string(),
                context: ctx.clone(),
                mse,
                phi_hat,
                identification_error: id_err,
            });
        }
        records.push(BenchRecord {
            method: trained.variant.label().to_string(),
            mse: shots.iter().zip(&per_shot).map(|(&k, v)| (k, Stat::of(v))).collect(),
            identification: if id_errors.is_empty() { None } else { Some(Stat::of(&id_errors)) },
            trials: contexts.len(),
            train_seconds_per_step: trained.seconds_per_step(),
            adapt_seconds: median(timings),
        });
    }

    if let (Some(m), true) = (maps, cfg.identification.zero_shot) {
        if let Some(camel) = models.iter().find(|t| t.variant == Variant::Camel) {
            let mut errs = Vec::new();
            for (trial, ((_, held), ctx)) in tasks.iter().zip(&contexts).enumerate() {
                let w = zero_shot_weights(&m.inverse, ctx)?;
                let e = physical_mse(camel, &w, held)?;
                errs.push(e);
                rows.push(TrialRow {
                    trial,
                    method: "phi-CAMEL".into(),
                    context: ctx.clone(),
                    mse: vec![e; shots.len()],
                    phi_hat: None,
                    identification_error: None,
                });
            }
            let s = Stat::of(&errs);
            records.push(BenchRecord {
                method: "phi-CAMEL".into(),
                mse: shots.iter().map(|&k| (k, s)).collect(),
                identification: None,
                trials: contexts.len(),
                train_seconds_per_step: camel.seconds_per_step(),
                adapt_seconds: 0.0,
            });
        }
    }
    Ok(Evaluation { records, rows })
}

/// Everything produced by [`run_experiment`].
pub struct ExperimentOutcome {
    pub generated: Generated,
    pub models: Vec<TrainedModel>,
    pub maps: Option<ContextMaps>,
    pub evaluation: Evaluation,
}

impl ExperimentOutcome {
    pub fn record(&self, method: &str) -> Option<&BenchRecord> {
        self.evaluation.records.iter().find(|r| r.method == method)
    }
}

/// Labels an error with the pipeline stage it came from, keeping its kind.
pub fn stage(label: &str, e: Error) -> Error {
    log::error!("{label} stage failed: {e}");
    e
}

/// Full pipeline. With `out_dir` set, checkpoints are reused or saved there
/// and `results.csv`, `trials.csv` and `timing.csv` are written.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<ExperimentOutcome> {
    let outcome = evaluate_experiment(cfg, out_dir)?;
    if let Some(dir) = out_dir {
        write_outcome(cfg, &outcome, dir, true)?;
    }
    Ok(outcome)
}

/// Writes the tables of an outcome; `timing` adds the wall-clock file.
pub fn write_outcome(cfg: &ExperimentConfig, outcome: &ExperimentOutcome, dir: &Path, timing: bool) -> Result<()> {
    let emitter = CsvEmitter::new(cfg, dir)?;
    emitter.results(&outcome.evaluation.records, &cfg.adaptation.shots)?;
    emitter.trials(&outcome.evaluation.rows, &cfg.adaptation.shots)?;
    if timing {
        emitter.timing(&outcome.evaluation.records)?;
    }
    Ok(())
}

/// Pipeline without table output; checkpoints go through `ckpt_dir`.
pub fn evaluate_experiment(cfg: &ExperimentConfig, ckpt_dir: Option<&Path>) -> Result<ExperimentOutcome> {
    let env = Environment::build(cfg)?;
    let generated = generate(cfg, &env).map_err(|e| stage("generate", e))?;
    let models = load_or_train(cfg, &generated.data, ckpt_dir)?;
    let maps = match models.iter().find(|t| t.variant == Variant::Camel) {
        Some(camel) => Some(
            fit_context_maps(camel, &generated.data, &generated.contexts, cfg.identification.affine)
                .map_err(|e| stage("identify", e))?,
        ),
        None => None,
    };
    let evaluation = evaluate_models(cfg, &env, &models, maps.as_ref()).map_err(|e| stage("adapt", e))?;
    Ok(ExperimentOutcome {
        generated,
        models,
        maps,
        evaluation,
    })
}

/// Median wall-clock of adaptation methods on one task.
#[derive(Debug, Clone, PartialEq)]
pub struct TimingReport {
    pub closed_form_medians: Vec<f64>,
    pub gradient_medians: Vec<f64>,
    pub repetitions: usize,
    pub gradient_steps: usize,
}

impl TimingReport {
    pub fn closed_form(&self) -> f64 {
        median(self.closed_form_medians.clone())
    }

    pub fn gradient(&self) -> f64 {
        median(self.gradient_medians.clone())
    }

    /// Gradient time over closed-form time.
    pub fn ratio(&self) -> f64 {
        self.gradient() / self.closed_form()
    }

    /// Largest relative deviation of a round's ratio from the overall ratio.
    pub fn round_spread(&self) -> f64 {
        let r = self.ratio();
        self.closed_form_medians
            .iter()
            .zip(&self.gradient_medians)
            .map(|(c, g)| ((g / c) / r - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Times closed-form CAMEL adaptation against `steps` gradient steps of
/// `baseline` on the same task, `repetitions` times per round.
pub fn bench_adaptation_speed(
    camel: &MetaModel,
    baseline: &MetaModel,
    task: &TaskDataset,
    gradient: GradientAdaptConfig,
    repetitions: usize,
    rounds: usize,
) -> Result<TimingReport> {
    if camel.net().len() != baseline.net().len() {
        return Err(Error::config("timed models must have the same size"));
    }
    let mut closed = Vec::with_capacity(rounds);
    let mut grad = Vec::with_capacity(rounds);
    for _ in 0..rounds {
        let mut a = Vec::with_capacity(repetitions);
        let mut b = Vec::with_capacity(repetitions);
        for _ in 0..repetitions {
            let t = Instant::now();
            std::hint::black_box(ols_adapt(camel, task, 0.0)?);
            a.push(t.elapsed().as_secs_f64());
            let t = Instant::now();
            std::hint::black_box(adapt(baseline, task, 0.0, gradient)?);
            b.push(t.elapsed().as_secs_f64());
        }
        closed.push(median(a));
        grad.push(median(b));
    }
    Ok(TimingReport {
        closed_form_medians: closed,
        gradient_medians: grad,
        repetitions,
        gradient_steps: gradient.steps,
    })
}

/// Bench stage: needs a CAMEL model and the configured baseline.
pub fn run_bench(cfg: &ExperimentConfig, models: &[TrainedModel], out_dir: Option<&Path>) -> Result<TimingReport> {
    let bench = cfg.bench.clone().unwrap_or(BenchConfig {
        repetitions: 100,
        rounds: 3,
        baseline: "anil".into(),
    });
    let base_variant = parse_variant(&bench.baseline)?;
    let camel = models
        .iter()
        .find(|m| m.variant == Variant::Camel)
        .ok_or_else(|| Error::config("bench needs a CAMEL model"))?;
    let base = models
        .iter()
        .find(|m| m.variant == base_variant)
        .ok_or_else(|| Error::config(format!("bench needs a {} model", base_variant.label())))?;
    let env = Environment::build(cfg)?;
    let k = *cfg.adaptation.shots.iter().max().expect("validated");
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, "bench"));
    let ctx = test_contexts(cfg)?.remove(0);
    let (shots, _) = env.test_task(&ctx, k, 1, 0.0, &mut rng)?;
    let task = camel.normalizer().task(&shots)?;
    let report = bench_adaptation_speed(
        camel.model(),
        base.model(),
        &task,
        gradient_config(cfg),
        bench.repetitions,
        bench.rounds,
    )?;
    if let Some(dir) = out_dir {
        CsvEmitter::new(cfg, dir)?.bench(&report, base.variant.label())?;
    }
    Ok(report)
}

/// One row of the ε-sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub epsilon: f64,
    pub mse: Vec<(usize, Stat)>,
    pub identification: Stat,
    pub zero_shot: Stat,
}

/// Repeats the CAMEL pipeline at each configured misalignment scale.
pub fn run_sweep(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<Vec<SweepRow>> {
    let sweep = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| Error::config("no [sweep] section in the config"))?;
    let mut rows = Vec::new();
    for &eps in &sweep.epsilon {
        let mut c = cfg.clone();
        c.system.epsilon = Some(eps);
        c.model.variants = vec!["camel".into()];
        let out = run_experiment(&c, None)?;
        let camel = out.record("CAMEL").expect("CAMEL was trained");
        let zero = out.record("phi-CAMEL").map_or(Stat { mean: f64::NAN, std: f64::NAN }, |r| r.mse[0].1);
        rows.push(SweepRow {
            epsilon: eps,
            mse: camel.mse.clone(),
            identification: camel.identification.unwrap_or(Stat { mean: f64::NAN, std: f64::NAN }),
            zero_shot: zero,
        });
        log::info!("epsilon {eps}: identification error {:.3e}", rows.last().unwrap().identification.mean);
    }
    if let Some(dir) = out_dir {
        CsvEmitter::new(cfg, dir)?.sweep(&rows, &cfg.adaptation.shots)?;
    }
    Ok(rows)
}

/// Trains CAMEL on a synthetic context-linear system and computes the
/// identifiability diagnostics on its training grid.
pub fn run_prop_check(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<PropositionDiagnostics> {
    let s = cfg
        .system
        .synthetic
        .as_ref()
        .ok_or_else(|| Error::config("prop-check needs a synthetic system"))?;
    if cfg.training.normalize_inputs || cfg.training.scale_targets {
        return Err(Error::config("prop-check runs on unnormalized data"));
    }
    let system = SyntheticLinearSystem::new(s.input_dim, s.hidden, s.context_dim, s.offset, s.seed)?;
    let env = Environment::build(cfg)?;
    let generated = generate(cfg, &env)?;
    if !generated.data.shared_grid() {
        return Err(Error::config("prop-check needs grid data"));
    }
    let trained = train_variant(cfg, Variant::Camel, &generated.data)?;
    let diag = PropositionDiagnostics::from_model(
        trained.model(),
        &system,
        &generated.data,
        RegConfig {
            lambda: cfg.training.lambda,
        },
        cfg.identification.affine,
    )?;
    if let Some(dir) = out_dir {
        CsvEmitter::new(cfg, dir)?.prop_check(&diag)?;
    }
    Ok(diag)
}

/// Outcome of the control experiment.
#[derive(Debug, Clone)]
pub struct ControlOutcome {
    pub target: Trajectory,
    /// Learned model with a fixed OLS weight, and the friction-free analytic
    /// controller, both on `fixed_context`.
    pub fixed: Option<(TrackingReport, TrackingReport)>,
    pub adaptive: TrackingReport,
    pub summary: ControlSummary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlSummary {
    pub switch_step: usize,
    /// RMS error over the window before the switch.
    pub pre_error: f64,
    /// RMS error over the last 50 steps of the recovery window.
    pub post_error: f64,
    pub phi_hat: Vec<f64>,
    pub phi_true: Vec<f64>,
    /// Relative error of the switched coordinate at the end of the recovery window.
    pub switched_error: f64,
}

impl ControlSummary {
    pub fn error_recovered(&self) -> bool {
        self.post_error < 2.0 * self.pre_error
    }
}

pub fn control_target(cfg: &ExperimentConfig, plant: &ManipulatorSystem) -> Result<Trajectory> {
    let c = cfg.control.as_ref().ok_or_else(|| Error::config("no [control] section"))?;
    let mut target = match &c.target {
        Some(path) => load_trajectory(path)?,
        None => swing_up_target(
            plant,
            c.target_context.as_ref().expect("validated"),
            &SwingUpConfig {
                horizon: c.horizon.unwrap_or(SwingUpConfig::default().horizon),
                ..Default::default()
            },
        )?,
    };
    if let Some(h) = c.horizon {
        if h > target.len() {
            return Err(Error::config(format!("horizon {h} exceeds the target length {}", target.len())));
        }
        target.q.truncate(h);
        target.qd.truncate(h);
        target.qdd.truncate(h);
        target.u.truncate(h);
    }
    Ok(target)
}

/// Tracking experiments with a trained CAMEL model: fixed-weight tracking
/// against the friction-free analytic controller, then online adaptation
/// through a context switch.
pub fn run_control(
    cfg: &ExperimentConfig,
    trained: &TrainedModel,
    maps: &ContextMaps,
    out_dir: Option<&Path>,
) -> Result<ControlOutcome> {
    let c = cfg.control.as_ref().ok_or_else(|| Error::config("no [control] section"))?;
    let env = Environment::build(cfg)?;
    let plant = env
        .manipulator()
        .ok_or_else(|| Error::config("control needs a manipulator system"))?
        .clone();
    let target = control_target(cfg, &plant)?;
    let mut tc = TrackingConfig::new(c.k, c.k_d, target.clone())?;
    tc.adaptive_derivative = c.derivative;
    tc.feedback = if c.feedback == "all" { FeedbackAxes::All } else { FeedbackAxes::Actuated };
    let h = tc.horizon();

    let fixed = match &c.fixed_context {
        Some(phi) => {
            let data = build_trajectory_dataset(
                &plant,
                std::slice::from_ref(phi),
                &cfg.data.trajectory_spec(),
                0.0,
                sub_seed(cfg.seed, "control-fit"),
            )?;
            let task = trained.normalizer().task(&data.tasks()[0])?;
            let w = ols_adapt(trained.model(), &task, 0.0)?.w;
            let learned = track_fixed_learned(&trained.dynamics, &w, &plant, phi, &tc)?;
            let analytic = track_fixed(
                &AnalyticFeedforward {
                    system: plant.with_friction(0.0),
                    phi: phi.clone(),
                },
                &plant,
                phi,
                &tc,
            )?;
            Some((learned, analytic))
        }
        None => None,
    };

    let switch = c.switch_step.unwrap_or(h / 2).min(h);
    if c.switch_index >= c.context.len() {
        return Err(Error::config("switch_index outside the context"));
    }
    let base = c.context.clone();
    let mut switched = base.clone();
    switched[c.switch_index] *= c.switch_factor;
    let schedule = |s: usize| if s < switch { base.clone() } else { switched.clone() };
    let adaptive = track_adaptive(&trained.dynamics, &plant, schedule, &tc, Some(&maps.forward))?;

    let w = c.recovery_window;
    let end = (switch + w).min(h);
    let pre = adaptive.window_rms(switch.saturating_sub(w), switch);
    let post = adaptive.window_rms(end.saturating_sub(50).max(switch), end);
    let at = end.saturating_sub(1);
    let phi_hat = adaptive.phi_hat[at].clone();
    let truth = schedule(at);
    let k = c.switch_index;
    let summary = ControlSummary {
        switch_step: switch,
        pre_error: pre,
        post_error: post,
        switched_error: (phi_hat[k] - truth[k]).abs() / truth[k].abs(),
        phi_hat,
        phi_true: truth,
    };
    if let Some(dir) = out_dir {
        let emitter = CsvEmitter::new(cfg, dir)?;
        emitter.tracking("adaptive.csv", &adaptive, &target)?;
        if let Some((l, a)) = &fixed {
            emitter.tracking("fixed_learned.csv", l, &target)?;
            emitter.tracking("fixed_analytic.csv", a, &target)?;
        }
        emitter.control_summary(&summary, fixed.as_ref().map(|(l, a)| (l.rms_error(), a.rms_error())))?;
    }
    Ok(ControlOutcome {
        target,
        fixed,
        adaptive,
        summary,
    })
}
