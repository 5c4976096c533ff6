//! Deterministic CSV output. Every file starts with a comment line carrying
//! the config hash and seed; floats are written in `{:e}` form.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::config::ExperimentConfig;
use super::{BenchRecord, ControlSummary, SweepRow, TimingReport, TrialRow};
use crate::control::TrackingReport;
use crate::systems::Trajectory;
use crate::error::{Error, Result};
use crate::identification::PropositionDiagnostics;
use crate::meta::MetaDataset;

pub struct CsvEmitter {
    dir: PathBuf,
    preamble: String,
}

fn join(values: impl IntoIterator<Item = f64>) -> String {
    values.into_iter().map(|v| format!("{v:e}")).collect::<Vec<_>>().join(",")
}

impl CsvEmitter {
    pub fn new(cfg: &ExperimentConfig, dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let hash = if cfg.hash.is_empty() { "none" } else { cfg.short_hash() };
        Ok(Self {
            dir: dir.to_path_buf(),
            preamble: format!("# config_hash={hash} seed={} name={}\n", cfg.seed, cfg.name),
        })
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.dir.join(file)
    }

    fn write(&self, file: &str, header: &str, body: &str) -> Result<()> {
        let path = self.path(file);
        let text = format!("{}{header}\n{body}", self.preamble);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    /// One row per method: mean and std of the held-out MSE per shot count,
    /// then the identification error.
    pub fn results(&self, records: &[BenchRecord], shots: &[usize]) -> Result<()> {
        let mut header = String::from("method,trials");
        for k in shots {
            write!(header, ",mse_mean_{k},mse_std_{k}").unwrap();
        }
        header.push_str(",id_error_mean,id_error_std");
        let mut body = String::new();
        for r in records {
            write!(body, "{},{}", r.method, r.trials).unwrap();
            for (_, s) in &r.mse {
                write!(body, ",{:e},{:e}", s.mean, s.std).unwrap();
            }
            match r.identification {
                Some(s) => writeln!(body, ",{:e},{:e}", s.mean, s.std).unwrap(),
                None => body.push_str(",,\n"),
            }
        }
        self.write("results.csv", &header, &body)
    }

    pub fn trials(&self, rows: &[TrialRow], shots: &[usize]) -> Result<()> {
        let n = rows.first().map_or(0, |r| r.context.len());
        let mut header = String::from("trial,method");
        for i in 0..n {
            write!(header, ",phi{i}").unwrap();
        }
        for k in shots {
            write!(header, ",mse_{k}").unwrap();
        }
        for i in 0..n {
            write!(header, ",phi_hat{i}").unwrap();
        }
        header.push_str(",id_error");
        let mut body = String::new();
        for r in rows {
            write!(body, "{},{},{},{}", r.trial, r.method, join(r.context.iter().copied()), join(r.mse.iter().copied()))
                .unwrap();
            match &r.phi_hat {
                Some(p) => write!(body, ",{}", join(p.iter().copied())).unwrap(),
                None => body.push_str(&",".repeat(n)),
            }
            match r.identification_error {
                Some(e) => writeln!(body, ",{e:e}").unwrap(),
                None => body.push_str(",\n"),
            }
        }
        self.write("trials.csv", &header, &body)
    }

    /// Wall-clock measurements; never byte-stable.
    pub fn timing(&self, records: &[BenchRecord]) -> Result<()> {
        let mut body = String::new();
        for r in records {
            writeln!(body, "{},{:e},{:e}", r.method, r.train_seconds_per_step, r.adapt_seconds).unwrap();
        }
        self.write("timing.csv", "method,train_seconds_per_step,adapt_seconds", &body)
    }

    pub fn bench(&self, report: &TimingReport, baseline: &str) -> Result<()> {
        let mut body = String::new();
        for (i, (c, g)) in report.closed_form_medians.iter().zip(&report.gradient_medians).enumerate() {
            writeln!(body, "{i},{c:e},{g:e},{:e}", g / c).unwrap();
        }
        writeln!(body, "all,{:e},{:e},{:e}", report.closed_form(), report.gradient(), report.ratio()).unwrap();
        let header = format!(
            "# repetitions={} gradient_steps={} baseline={baseline}\nround,closed_form_seconds,gradient_seconds,ratio",
            report.repetitions, report.gradient_steps
        );
        self.write("bench.csv", &header, &body)
    }

    pub fn sweep(&self, rows: &[SweepRow], shots: &[usize]) -> Result<()> {
        let mut header = String::from("epsilon");
        for k in shots {
            write!(header, ",mse_mean_{k},mse_std_{k}").unwrap();
        }
        header.push_str(",id_error_mean,id_error_std,zero_shot_mean,zero_shot_std");
        let mut body = String::new();
        for r in rows {
            write!(body, "{:e}", r.epsilon).unwrap();
            for (_, s) in &r.mse {
                write!(body, ",{:e},{:e}", s.mean, s.std).unwrap();
            }
            writeln!(
                body,
                ",{:e},{:e},{:e},{:e}",
                r.identification.mean, r.identification.std, r.zero_shot.mean, r.zero_shot.std
            )
            .unwrap();
        }
        self.write("sweep.csv", &header, &body)
    }

    pub fn prop_check(&self, d: &PropositionDiagnostics) -> Result<()> {
        let body = format!(
            "{:e},{:e},{:e},{:e}\n",
            d.p_residual,
            d.q_residual,
            d.identity_error,
            d.meta_loss.unwrap_or(f64::NAN)
        );
        self.write("prop_check.csv", "p_residual,q_residual,identity_error,meta_loss", &body)
    }

    pub fn tracking(&self, file: &str, report: &TrackingReport, target: &Trajectory) -> Result<()> {
        let path = self.path(file);
        let mut buf = self.preamble.clone().into_bytes();
        report.write_csv(target, &mut buf).map_err(|e| Error::io(&path, e))?;
        fs::write(&path, buf).map_err(|e| Error::io(&path, e))
    }

    pub fn control_summary(&self, s: &ControlSummary, fixed: Option<(f64, f64)>) -> Result<()> {
        let n = s.phi_hat.len();
        let mut header = String::from("switch_step,pre_error,post_error,recovered,switched_error");
        for i in 0..n {
            write!(header, ",phi_hat{i},phi_true{i}").unwrap();
        }
        header.push_str(",fixed_learned_rms,fixed_analytic_rms");
        let mut body = format!(
            "{},{:e},{:e},{},{:e}",
            s.switch_step,
            s.pre_error,
            s.post_error,
            s.error_recovered(),
            s.switched_error
        );
        for i in 0..n {
            write!(body, ",{:e},{:e}", s.phi_hat[i], s.phi_true[i]).unwrap();
        }
        match fixed {
            Some((l, a)) => writeln!(body, ",{l:e},{a:e}").unwrap(),
            None => body.push_str(",,\n"),
        }
        self.write("control.csv", &header, &body)
    }
}

/// Long-format dump of a meta-dataset: `task,phi..,x..,y`.
pub fn write_dataset_csv(data: &MetaDataset, path: &Path, preamble: &str) -> Result<()> {
    let d = data.input_dim();
    let n = data.tasks().first().and_then(|t| t.context()).map_or(0, |c| c.len());
    let mut text = String::from(preamble);
    text.push_str("task");
    for i in 0..n {
        write!(text, ",phi{i}").unwrap();
    }
    for i in 0..d {
        write!(text, ",x{i}").unwrap();
    }
    text.push_str(",y\n");
    for (t, task) in data.tasks().iter().enumerate() {
        let ctx = task.context().map(|c| join(c.iter().copied())).unwrap_or_default();
        for i in 0..task.len() {
            write!(text, "{t}").unwrap();
            if n > 0 {
                write!(text, ",{ctx}").unwrap();
            }
            writeln!(text, ",{},{:e}", join(task.input(i)), task.targets()[i]).unwrap();
        }
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
