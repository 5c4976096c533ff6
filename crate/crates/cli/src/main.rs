use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use camel::experiment::{
    self, evaluate_experiment, fit_context_maps, generate, load_or_train, run_bench, run_control, run_prop_check,
    run_sweep, write_dataset_csv, write_outcome, CsvEmitter, Environment, ExperimentConfig,
};
use camel::meta::Variant;

/// Context-affine meta-learning experiments.
#[derive(Debug, Parser)]
#[command(name = "camel", version)]
struct Cli {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the root seed of the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Skip wall-clock outputs so that every written file is reproducible.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the training contexts and meta-dataset.
    Generate,
    /// Train every configured variant and save checkpoints.
    Train,
    /// Adapt on fresh test environments and tabulate held-out errors.
    Adapt,
    /// Context identification with CAMEL; `--sweep` runs the epsilon sweep.
    Identify {
        #[arg(long)]
        sweep: bool,
    },
    /// Identifiability diagnostics on a synthetic context-linear system.
    PropCheck,
    /// Fixed and adaptive trajectory tracking.
    Control,
    /// Closed-form against gradient adaptation time.
    Bench,
    /// Print the tables found in the output directory.
    Report,
}

/// Exit code 2 for bad input, 3 for numerical failures.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<camel::Error>() {
        Some(e) if e.is_config_error() => 2,
        Some(_) => 3,
        None => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(if cli.deterministic { None } else { Some(env_logger::TimestampPrecision::Seconds) })
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn load_config(cli: &Cli) -> anyhow::Result<ExperimentConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| camel::Error::InvalidConfig("--config is required for this command".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    if let Command::Report = cli.command {
        return report(&cli.out_dir);
    }
    let cfg = load_config(cli)?;
    let dir = cli.out_dir.as_path();
    match &cli.command {
        Command::Generate => {
            let env = Environment::build(&cfg)?;
            let g = generate(&cfg, &env)?;
            let emitter = CsvEmitter::new(&cfg, dir)?;
            write_dataset_csv(&g.data, &emitter.path("dataset.csv"), &preamble(&cfg))?;
            println!("{} tasks, {} samples -> {}", g.data.num_tasks(), g.data.total_samples(), dir.display());
        }
        Command::Train => {
            let env = Environment::build(&cfg)?;
            let g = generate(&cfg, &env)?;
            let models = load_or_train(&cfg, &g.data, Some(dir))?;
            for m in &models {
                let last = m.history.last().copied().unwrap_or(f64::NAN);
                println!("{}: {} steps, final meta-loss {last:.3e}", m.variant.label(), m.history.len());
            }
        }
        Command::Adapt => {
            let out = evaluate_experiment(&cfg, Some(dir))?;
            write_outcome(&cfg, &out, dir, !cli.deterministic)?;
            print_records(&out.evaluation.records);
        }
        Command::Identify { sweep: true } => {
            for row in run_sweep(&cfg, Some(dir))? {
                println!(
                    "epsilon {:<6} identification error {:.3e} ± {:.1e}",
                    row.epsilon, row.identification.mean, row.identification.std
                );
            }
        }
        Command::Identify { sweep: false } => {
            let mut c = cfg.clone();
            c.model.variants = vec!["camel".into()];
            let out = evaluate_experiment(&c, Some(dir))?;
            write_outcome(&c, &out, dir, !cli.deterministic)?;
            if let Some(r) = out.record("CAMEL").and_then(|r| r.identification) {
                println!("identification relative error {:.3e} ± {:.1e}", r.mean, r.std);
            }
        }
        Command::PropCheck => {
            let d = run_prop_check(&cfg, Some(dir))?;
            println!(
                "P residual {:.3e}, Q residual {:.3e}, |QP^T - I| {:.3e}, meta-loss {:.3e}",
                d.p_residual,
                d.q_residual,
                d.identity_error,
                d.meta_loss.unwrap_or(f64::NAN)
            );
        }
        Command::Control => {
            let mut c = cfg.clone();
            c.model.variants = vec!["camel".into()];
            let env = Environment::build(&c)?;
            let g = generate(&c, &env)?;
            let models = load_or_train(&c, &g.data, Some(dir))?;
            let maps = fit_context_maps(&models[0], &g.data, &g.contexts, c.identification.affine)?;
            let out = run_control(&c, &models[0], &maps, Some(dir))?;
            let s = &out.summary;
            if let Some((l, a)) = &out.fixed {
                println!("fixed tracking RMS: learned {:.4}, friction-free analytic {:.4}", l.rms_error(), a.rms_error());
            }
            println!(
                "adaptive: pre-switch {:.4}, end of window {:.4}, identified {:?} (truth {:?})",
                s.pre_error, s.post_error, s.phi_hat, s.phi_true
            );
        }
        Command::Bench => {
            let env = Environment::build(&cfg)?;
            let g = generate(&cfg, &env)?;
            let models = load_or_train(&cfg, &g.data, Some(dir))?;
            if !models.iter().any(|m| m.variant == Variant::Camel) {
                return Err(camel::Error::InvalidConfig("bench needs 'camel' among the variants".into()).into());
            }
            let r = run_bench(&cfg, &models, if cli.deterministic { None } else { Some(dir) })?;
            println!(
                "closed form {:.3e}s, gradient {:.3e}s, ratio {:.1}x (round spread {:.0}%)",
                r.closed_form(),
                r.gradient(),
                r.ratio(),
                100.0 * r.round_spread()
            );
        }
        Command::Report => unreachable!(),
    }
    Ok(())
}

fn preamble(cfg: &ExperimentConfig) -> String {
    format!("# config_hash={} seed={} name={}\n", cfg.short_hash(), cfg.seed, cfg.name)
}

fn print_records(records: &[experiment::BenchRecord]) {
    for r in records {
        let cols: Vec<String> = r
            .mse
            .iter()
            .map(|(k, s)| format!("{k}-shot {:.2e} ± {:.1e}", s.mean, s.std))
            .collect();
        let id = r.identification.map_or(String::new(), |s| format!(", id {:.2e}", s.mean));
        println!("{:<10} {}{id}", r.method, cols.join(", "));
    }
}

const TABLES: [&str; 7] = [
    "results.csv",
    "sweep.csv",
    "prop_check.csv",
    "control.csv",
    "bench.csv",
    "timing.csv",
    "trials.csv",
];

fn report(dir: &Path) -> anyhow::Result<()> {
    let mut found = false;
    for name in TABLES {
        let path = dir.join(name);
        if !path.exists() {
            continue;
        }
        found = true;
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        println!("== {name}");
        print!("{}", align(&text));
        println!();
    }
    if !found {
        return Err(camel::Error::InvalidConfig(format!("no result tables in {}", dir.display())).into());
    }
    Ok(())
}

/// Pads CSV columns to a common width; comment lines pass through.
fn align(text: &str) -> String {
    let rows: Vec<Vec<&str>> = text
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| l.split(',').collect())
        .collect();
    let ncols = rows.iter().map(|r| r.len()).max().unwrap_or(0);
    let widths: Vec<usize> = (0..ncols)
        .map(|j| rows.iter().filter_map(|r| r.get(j)).map(|c| c.len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for line in text.lines().filter(|l| l.starts_with('#')) {
        out.push_str(line);
        out.push('\n');
    }
    for r in rows {
        let cells: Vec<String> = r.iter().enumerate().map(|(j, c)| format!("{c:<w$}", w = widths[j])).collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
    }
    out
}
