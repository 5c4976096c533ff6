use std::path::Path;

use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::meta::Variant;
use crate::systems::dataset::{ContextSampler, SamplingSpec};
use crate::systems::manipulator::TrajectorySpec;
use crate::systems::CapacitorGeometry;

/// Experiment description parsed from a TOML file.
#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub system: SystemConfig,
    pub contexts: ContextsConfig,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    #[serde(default)]
    pub adaptation: AdaptationConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    #[serde(default)]
    pub identification: IdentificationConfig,
    pub sweep: Option<SweepConfig>,
    pub control: Option<ControlConfig>,
    pub bench: Option<BenchConfig>,
    /// SHA-256 of the source text; empty for configs built in code.
    #[serde(skip)]
    pub hash: String,
}

fn default_seed() -> u64 {
    1
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    /// `charges`, `capacitor`, `pendulum`, `cartpole`, `arm` or `synthetic`.
    pub kind: String,
    /// Capacitor misalignment scale.
    pub epsilon: Option<f64>,
    /// Viscous friction of the manipulators.
    pub friction: Option<f64>,
    pub capacitor: Option<CapacitorGridConfig>,
    pub synthetic: Option<SyntheticConfig>,
}

/// Overrides of the capacitor grid; missing fields keep the defaults.
#[derive(Debug, Clone, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields)]
pub struct CapacitorGridConfig {
    pub rows: Option<usize>,
    pub cols: Option<usize>,
    pub lower_row: Option<f64>,
    pub upper_row: Option<f64>,
    pub plate_start: Option<f64>,
    pub plate_end: Option<f64>,
    pub shift_scale: Option<f64>,
}

impl CapacitorGridConfig {
    pub fn geometry(&self) -> CapacitorGeometry {
        let d = CapacitorGeometry::default();
        CapacitorGeometry {
            rows: self.rows.unwrap_or(d.rows),
            cols: self.cols.unwrap_or(d.cols),
            lower_row: self.lower_row.unwrap_or(d.lower_row),
            upper_row: self.upper_row.unwrap_or(d.upper_row),
            plate_start: self.plate_start.unwrap_or(d.plate_start),
            plate_end: self.plate_end.unwrap_or(d.plate_end),
            shift_scale: self.shift_scale.unwrap_or(d.shift_scale),
            ..d
        }
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub input_dim: usize,
    pub hidden: usize,
    pub context_dim: usize,
    #[serde(default)]
    pub offset: bool,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ContextsConfig {
    pub train: SamplerConfig,
    /// Defaults to the training distribution.
    pub test: Option<SamplerConfig>,
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    /// `uniform`, `product` or `fixed`.
    pub kind: String,
    #[serde(default)]
    pub count: usize,
    #[serde(default)]
    pub low: Vec<f64>,
    #[serde(default)]
    pub high: Vec<f64>,
    #[serde(default)]
    pub levels: Vec<Vec<f64>>,
    #[serde(default)]
    pub values: Vec<Vec<f64>>,
}

impl SamplerConfig {
    pub fn sampler(&self) -> Result<ContextSampler> {
        match self.kind.as_str() {
            "uniform" => {
                if self.low.is_empty() || self.low.len() != self.high.len() {
                    return Err(Error::config("uniform sampler needs matching 'low' and 'high'"));
                }
                Ok(ContextSampler::Uniform {
                    low: self.low.clone(),
                    high: self.high.clone(),
                })
            }
            "product" => {
                if self.levels.is_empty() || self.levels.iter().any(|l| l.is_empty()) {
                    return Err(Error::config("product sampler needs non-empty 'levels'"));
                }
                Ok(ContextSampler::Product(self.levels.clone()))
            }
            "fixed" => {
                if self.values.is_empty() {
                    return Err(Error::config("fixed sampler needs 'values'"));
                }
                Ok(ContextSampler::Fixed(self.values.clone()))
            }
            other => Err(Error::config(format!("unknown context sampler '{other}'"))),
        }
    }

    /// Number of contexts this sampler yields.
    pub fn len(&self) -> usize {
        match self.kind.as_str() {
            "product" => self.levels.iter().map(|l| l.len()).product(),
            "fixed" => self.values.len(),
            _ => self.count,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// `grid`, `uniform` or `trajectory`.
    pub kind: String,
    #[serde(default)]
    pub lo: Vec<f64>,
    #[serde(default)]
    pub hi: Vec<f64>,
    #[serde(default)]
    pub counts: Vec<usize>,
    #[serde(default)]
    pub count: usize,
    pub trajectories: Option<usize>,
    pub length: Option<usize>,
    pub dt: Option<f64>,
    pub amplitude: Option<[f64; 2]>,
    pub period: Option<[f64; 2]>,
    /// Standard deviation of the training-target noise.
    #[serde(default)]
    pub noise: f64,
}

impl DataConfig {
    pub fn sampling(&self) -> Result<SamplingSpec> {
        match self.kind.as_str() {
            "grid" => {
                if self.lo.len() != self.hi.len() || self.lo.len() != self.counts.len() || self.lo.is_empty() {
                    return Err(Error::config("grid data needs matching 'lo', 'hi' and 'counts'"));
                }
                if self.counts.contains(&0) {
                    return Err(Error::config("grid counts must be positive"));
                }
                Ok(SamplingSpec::Grid {
                    lo: self.lo.clone(),
                    hi: self.hi.clone(),
                    counts: self.counts.clone(),
                })
            }
            "uniform" => {
                if self.lo.len() != self.hi.len() || self.lo.is_empty() || self.count == 0 {
                    return Err(Error::config("uniform data needs matching 'lo', 'hi' and a positive 'count'"));
                }
                Ok(SamplingSpec::Uniform {
                    lo: self.lo.clone(),
                    hi: self.hi.clone(),
                    count: self.count,
                })
            }
            other => Err(Error::config(format!("data kind '{other}' has no probe sampling"))),
        }
    }

    pub fn trajectory_spec(&self) -> TrajectorySpec {
        let d = TrajectorySpec::default();
        TrajectorySpec {
            trajectories: self.trajectories.unwrap_or(d.trajectories),
            length: self.length.unwrap_or(d.length),
            dt: self.dt.unwrap_or(d.dt),
            amplitude: self.amplitude.map_or(d.amplitude, |a| (a[0], a[1])),
            period: self.period.map_or(d.period, |p| (p[0], p[1])),
            ..d
        }
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Variants trained on the same data; the first one is the reference.
    #[serde(default = "default_variants")]
    pub variants: Vec<String>,
    pub hidden: Vec<usize>,
    pub rank: usize,
    #[serde(default)]
    pub bias_head: bool,
    /// ANIL inner step size.
    #[serde(default = "default_inner_lr")]
    pub inner_lr: f64,
}

fn default_variants() -> Vec<String> {
    vec!["camel".into()]
}

fn default_inner_lr() -> f64 {
    1e-2
}

impl ModelConfig {
    pub fn parsed_variants(&self) -> Result<Vec<Variant>> {
        if self.variants.is_empty() {
            return Err(Error::config("at least one model variant is required"));
        }
        self.variants.iter().map(|v| parse_variant(v)).collect()
    }

    pub fn layer_sizes(&self, input_dim: usize) -> Vec<usize> {
        let mut layers = vec![input_dim];
        layers.extend(&self.hidden);
        layers.push(self.rank + self.bias_head as usize);
        layers
    }
}

pub fn parse_variant(name: &str) -> Result<Variant> {
    match name.to_ascii_lowercase().as_str() {
        "camel" => Ok(Variant::Camel),
        "coda" => Ok(Variant::Coda),
        "anil" | "anil-fo" | "anil_fo" => Ok(Variant::AnilFo),
        other => Err(Error::config(format!("unknown model variant '{other}'"))),
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub final_learning_rate: Option<f64>,
    #[serde(default)]
    pub lambda: f64,
    #[serde(default)]
    pub refine_steps: usize,
    pub target_loss: Option<f64>,
    /// Uniform amplitude of the initial CAMEL task weights; zero starts at the origin.
    #[serde(default)]
    pub bank_init: f64,
    #[serde(default)]
    pub normalize_inputs: bool,
    #[serde(default = "default_true")]
    pub scale_targets: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct AdaptationConfig {
    #[serde(default = "default_shots")]
    pub shots: Vec<usize>,
    #[serde(default)]
    pub ridge: f64,
    #[serde(default = "default_gradient_steps")]
    pub gradient_steps: usize,
    #[serde(default = "default_inner_lr")]
    pub gradient_learning_rate: f64,
}

fn default_shots() -> Vec<usize> {
    vec![10]
}

fn default_gradient_steps() -> usize {
    10
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        Self {
            shots: default_shots(),
            ridge: 0.0,
            gradient_steps: default_gradient_steps(),
            gradient_learning_rate: default_inner_lr(),
        }
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    /// Number of test environments.
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_held_out")]
    pub held_out: usize,
    /// Standard deviation of the noise on adaptation shots.
    #[serde(default)]
    pub noise: f64,
    /// Probe domain of shots and held-out points; defaults to the training box.
    pub lo: Option<Vec<f64>>,
    pub hi: Option<Vec<f64>>,
}

fn default_trials() -> usize {
    10
}

fn default_held_out() -> usize {
    200
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            trials: default_trials(),
            held_out: default_held_out(),
            noise: 0.0,
            lo: None,
            hi: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct IdentificationConfig {
    #[serde(default)]
    pub affine: bool,
    #[serde(default = "default_true")]
    pub zero_shot: bool,
}

impl Default for IdentificationConfig {
    fn default() -> Self {
        Self {
            affine: false,
            zero_shot: true,
        }
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub epsilon: Vec<f64>,
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ControlConfig {
    pub k: f64,
    pub k_d: f64,
    #[serde(default)]
    pub derivative: bool,
    /// `actuated` or `all`.
    #[serde(default = "default_axes")]
    pub feedback: String,
    /// Target CSV; relative paths resolve against the config file.
    pub target: Option<String>,
    /// Context the target is generated on when no file is given.
    pub target_context: Option<Vec<f64>>,
    pub horizon: Option<usize>,
    /// Plant context before the switch.
    pub context: Vec<f64>,
    /// Step at which coordinate `switch_index` is multiplied by `switch_factor`.
    pub switch_step: Option<usize>,
    #[serde(default)]
    pub switch_index: usize,
    #[serde(default = "default_factor")]
    pub switch_factor: f64,
    /// Window after the switch over which recovery is judged.
    #[serde(default = "default_window")]
    pub recovery_window: usize,
    /// Context of the fixed-model tracking comparison.
    pub fixed_context: Option<Vec<f64>>,
}

fn default_axes() -> String {
    "actuated".into()
}

fn default_factor() -> f64 {
    2.0
}

fn default_window() -> usize {
    300
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    /// Variant timed against closed-form adaptation.
    #[serde(default = "default_baseline")]
    pub baseline: String,
}

fn default_repetitions() -> usize {
    100
}

fn default_rounds() -> usize {
    3
}

fn default_baseline() -> String {
    "anil".into()
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::config(format!("{e}")))?;
        let digest = Sha256::digest(text.as_bytes());
        cfg.hash = digest.iter().map(|b| format!("{b:02x}")).collect();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(control) = cfg.control.as_mut() {
            if let Some(t) = control.target.as_mut() {
                let p = Path::new(t.as_str());
                if p.is_relative() {
                    if let Some(dir) = path.parent() {
                        *t = dir.join(p).display().to_string();
                    }
                }
                if !Path::new(t.as_str()).exists() {
                    return Err(Error::config(format!("target file '{t}' does not exist")));
                }
            }
        }
        Ok(cfg)
    }

    /// Short form of the hash used in emitted files.
    pub fn short_hash(&self) -> &str {
        &self.hash[..self.hash.len().min(16)]
    }

    pub fn num_train_tasks(&self) -> usize {
        self.contexts.train.len()
    }

    pub fn validate(&self) -> Result<()> {
        let variants = self.model.parsed_variants()?;
        let t = self.num_train_tasks();
        if t == 0 {
            return Err(Error::config("no training contexts"));
        }
        self.contexts.train.sampler()?;
        if let Some(test) = &self.contexts.test {
            test.sampler()?;
        }
        if self.model.rank == 0 {
            return Err(Error::config("rank must be positive"));
        }
        if variants.contains(&Variant::Camel) && self.model.rank >= t {
            return Err(Error::config(format!(
                "CAMEL needs rank r = {} below the number of training tasks T = {t}",
                self.model.rank
            )));
        }
        let tr = &self.training;
        if !(tr.learning_rate > 0.0) || tr.final_learning_rate.is_some_and(|f| !(f > 0.0)) {
            return Err(Error::config("learning rates must be positive"));
        }
        if tr.lambda < 0.0 || tr.bank_init < 0.0 {
            return Err(Error::config("lambda and bank_init must be >= 0"));
        }
        let ad = &self.adaptation;
        if ad.shots.is_empty() || ad.shots.contains(&0) {
            return Err(Error::config("adaptation shots must be positive"));
        }
        if ad.ridge < 0.0 {
            return Err(Error::config("adaptation ridge must be >= 0"));
        }
        let ev = &self.evaluation;
        if ev.trials == 0 || ev.held_out == 0 {
            return Err(Error::config("evaluation needs at least one trial and one held-out point"));
        }
        if ev.noise < 0.0 || self.data.noise < 0.0 {
            return Err(Error::config("noise levels must be >= 0"));
        }
        match self.system.kind.as_str() {
            "charges" | "capacitor" | "synthetic" => {
                self.data.sampling()?;
            }
            "pendulum" | "cartpole" | "arm" | "acrobot" => {
                if self.data.kind != "trajectory" {
                    return Err(Error::config("manipulator systems use 'trajectory' data"));
                }
            }
            other => return Err(Error::config(format!("unknown system '{other}'"))),
        }
        if self.system.kind == "synthetic" && self.system.synthetic.is_none() {
            return Err(Error::config("synthetic system needs a [system.synthetic] table"));
        }
        if let Some(eps) = self.system.epsilon {
            if !(0.0..=1.0).contains(&eps) {
                return Err(Error::config(format!("epsilon {eps} outside [0, 1]")));
            }
        }
        if let Some(sweep) = &self.sweep {
            if sweep.epsilon.is_empty() || sweep.epsilon.iter().any(|e| !(0.0..=1.0).contains(e)) {
                return Err(Error::config("sweep epsilons must lie in [0, 1]"));
            }
        }
        if let Some(c) = &self.control {
            if !(c.k >= 0.0 && c.k_d >= 0.0) {
                return Err(Error::config("control gains must be >= 0"));
            }
            if c.feedback != "actuated" && c.feedback != "all" {
                return Err(Error::config(format!("unknown feedback axes '{}'", c.feedback)));
            }
            if c.target.is_none() && c.target_context.is_none() {
                return Err(Error::config("control needs a target file or a target context"));
            }
        }
        if let Some(b) = &self.bench {
            if b.repetitions == 0 || b.rounds == 0 {
                return Err(Error::config("bench repetitions and rounds must be positive"));
            }
            parse_variant(&b.baseline)?;
        }
        Ok(())
    }
}
