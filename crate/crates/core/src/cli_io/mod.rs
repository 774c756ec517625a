//! Command-line surface of the `pbsd-lab` binary.

pub mod manifest;
pub mod report;

pub use manifest::{canonical_json, config_hash, config_hash_of_file, RunManifest, MANIFEST_FILE};
pub use report::{render_report, sig6, ReportFiles};

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use crate::error::{LabError, Result};
use crate::information::{rate_experiment, teacher_gap_diagnostic, Design, RateConfig};
use crate::losses::BETA_SWEEP;
use crate::oracle::{check_instance, random_instance};
use crate::policy::{init_policy, Checkpoint, PolicyParams, PolicyShape};
use crate::rng::{derive_seed, Stream};
use crate::tasks::generate_task;
use crate::trainer::{evaluate, run_to_dir, TrainConfig};

pub const OUT_ENV: &str = "PBSD_LAB_OUT";
pub const DEFAULT_OUT: &str = "out";
pub const EXTERNAL_TEACHER_BIAS: f64 = 8.0;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "pbsd-lab", version, about = "Preference-based self-distillation on exactly enumerable toy policies")]
pub struct Cli {
    /// Base seed for every random stream. Required by train, rate, analyze and sweep.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Suppress progress lines on stderr.
    #[arg(long, global = true)]
    pub quiet: bool,
    /// Output directory (overrides PBSD_LAB_OUT).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum DesignArg {
    Rich,
    Narrow,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check the closed-form optimum, the improvement gap and reward recovery on random instances.
    Verify {
        #[arg(long, default_value_t = 50)]
        instances: u64,
        #[arg(long, default_value_t = 216)]
        max_size: usize,
    },
    /// Train from a JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Exact evaluation of a checkpoint on the task named by a config.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
    },
    /// Pairwise-MLE error versus sample size.
    Rate {
        #[arg(long = "d", default_value_t = 10)]
        dim: usize,
        #[arg(long, default_value_t = 16)]
        seeds: usize,
        #[arg(long, value_enum, default_value_t = DesignArg::Rich)]
        design: DesignArg,
        #[arg(long, default_value_t = 1.0)]
        beta: f64,
        /// Smallest sample size as a power of two.
        #[arg(long, default_value_t = 7)]
        log2_n_min: u32,
        /// Largest sample size as a power of two.
        #[arg(long, default_value_t = 14)]
        log2_n_max: u32,
    },
    /// Margin and curvature diagnostics for the contextual and an external teacher.
    Analyze {
        #[arg(long)]
        config: PathBuf,
        /// Student parameters; defaults to the initialization implied by the config.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 2000)]
        pairs: usize,
        #[arg(long, default_value_t = EXTERNAL_TEACHER_BIAS)]
        external_bias: f64,
    },
    /// Render metrics JSONL into CSV and SVG charts.
    Report {
        metrics: PathBuf,
    },
    /// Train once per beta over a base config.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',')]
        betas: Option<Vec<f64>>,
    },
}

/// Per-invocation context shared by the subcommands.
struct Ctx {
    seed: Option<u64>,
    quiet: bool,
    out: Option<PathBuf>,
}

impl Ctx {
    fn progress(&self, line: &str) {
        if !self.quiet {
            eprintln!("{line}");
        }
    }

    fn require_seed(&self, command: &str) -> Result<u64> {
        self.seed.ok_or_else(|| LabError::Config(format!("`{command}` requires --seed")))
    }

    /// `--out`, then `PBSD_LAB_OUT`, then `fallback`.
    fn out_dir(&self, fallback: PathBuf) -> PathBuf {
        if let Some(out) = &self.out {
            return out.clone();
        }
        match std::env::var_os(OUT_ENV) {
            Some(dir) if !dir.is_empty() => PathBuf::from(dir),
            _ => fallback,
        }
    }
}

/// Reads a JSON file, rejecting unknown keys and duplicates. Every failure is a config error.
pub fn load_config(path: &Path) -> Result<TrainConfig> {
    let text = fs::read_to_string(path).map_err(|e| LabError::Config(format!("cannot read {}: {e}", path.display())))?;
    TrainConfig::from_json(&text)
}

fn exit_code(err: &LabError) -> i32 {
    match err {
        LabError::Config(_) => EXIT_USAGE,
        _ => EXIT_FAILURE,
    }
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| LabError::io(parent, e))?;
    }
    fs::write(path, body).map_err(|e| LabError::io(path, e))
}

fn stdout_line(text: &str) {
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(text.as_bytes());
}

/// Parses `argv` and runs the command; returns the process exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let ctx = Ctx { seed: cli.seed, quiet: cli.quiet, out: cli.out };
    match execute(&ctx, cli.command) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            exit_code(&err)
        }
    }
}

fn execute(ctx: &Ctx, command: Command) -> Result<i32> {
    match command {
        Command::Verify { instances, max_size } => verify(ctx, instances, max_size),
        Command::Train { config } => train(ctx, &config),
        Command::Eval { checkpoint, config } => eval(&checkpoint, &config),
        Command::Rate { dim, seeds, design, beta, log2_n_min, log2_n_max } => {
            if log2_n_min > log2_n_max || log2_n_max > 30 {
                return Err(LabError::Config("need log2_n_min <= log2_n_max <= 30".into()));
            }
            let cfg = RateConfig {
                dim,
                seeds,
                beta,
                design: match design {
                    DesignArg::Rich => Design::Rich,
                    DesignArg::Narrow => Design::Narrow,
                },
                n_grid: (log2_n_min..=log2_n_max).map(|k| 1usize << k).collect(),
                ..RateConfig::default()
            };
            rate(ctx, &cfg)
        }
        Command::Analyze { config, checkpoint, pairs, external_bias } => {
            analyze(ctx, &config, checkpoint.as_deref(), pairs, external_bias)
        }
        Command::Report { metrics } => {
            let fallback = metrics.parent().map(Path::to_path_buf).unwrap_or_default();
            let files = render_report(&metrics, &ctx.out_dir(fallback))?;
            ctx.progress(&format!("wrote {} rows to {}", files.rows, files.csv.display()));
            Ok(EXIT_OK)
        }
        Command::Sweep { config, betas } => sweep(ctx, &config, betas.unwrap_or_else(|| BETA_SWEEP.to_vec())),
    }
}

fn verify(ctx: &Ctx, instances: u64, max_size: usize) -> Result<i32> {
    if max_size < 2 {
        return Err(LabError::Config("max_size must be >= 2".into()));
    }
    let base = ctx.seed.unwrap_or(0);
    let mut failures = 0;
    for i in 0..instances {
        let inst = random_instance(base.wrapping_add(i), max_size);
        for line in check_instance(&inst)? {
            failures += usize::from(!line.pass);
            stdout_line(&(serde_json::to_string(&line)? + "\n"));
        }
    }
    ctx.progress(&format!("{} checks, {failures} failed", instances * 3));
    Ok(if failures == 0 { EXIT_OK } else { EXIT_FAILURE })
}

fn config_value<T: serde::Serialize>(config: &T) -> Result<Value> {
    Ok(serde_json::to_value(config)?)
}

fn train_one(ctx: &Ctx, config: &TrainConfig, dir: &Path) -> Result<Value> {
    let started = manifest::unix_now();
    ctx.progress(&format!("training {:?} into {}", config.method, dir.display()));
    let (outcome, files) = run_to_dir(config, dir)?;
    for m in &outcome.metrics {
        ctx.progress(&format!(
            "step {:>5}  expected_reward {}  tv_to_tilted {}",
            m.step,
            sig6(m.expected_reward_exact),
            sig6(m.tv_to_tilted)
        ));
    }
    let first = &outcome.metrics[0];
    let last = outcome.metrics.last().expect("at least one eval");
    let summary = json!({
        "initial_expected_reward": first.expected_reward_exact,
        "final_expected_reward": last.expected_reward_exact,
        "initial_tv_to_tilted": first.tv_to_tilted,
        "final_tv_to_tilted": last.tv_to_tilted,
    });
    let on_disk: Value = serde_json::from_str(
        &fs::read_to_string(&files.config).map_err(|e| LabError::io(&files.config, e))?,
    )?;
    let seeds = BTreeMap::from([("run_seed".to_string(), config.run_seed), ("task_seed".to_string(), config.task_seed)]);
    RunManifest::new("train", &on_disk, seeds, started, summary.clone()).save(dir)?;
    Ok(summary)
}

fn train(ctx: &Ctx, config_path: &Path) -> Result<i32> {
    let mut config = load_config(config_path)?;
    config.run_seed = ctx.require_seed("train")?;
    let fallback = config_path.parent().map(|p| p.join(DEFAULT_OUT)).unwrap_or_else(|| DEFAULT_OUT.into());
    let summary = train_one(ctx, &config, &ctx.out_dir(fallback))?;
    stdout_line(&(serde_json::to_string(&summary)? + "\n"));
    Ok(EXIT_OK)
}

fn eval(checkpoint: &Path, config_path: &Path) -> Result<i32> {
    let config = load_config(config_path)?;
    let task = generate_task(config.task_seed, &config.task)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let report = evaluate(&ckpt, &task)?;
    stdout_line(&(serde_json::to_string_pretty(&report)? + "\n"));
    Ok(EXIT_OK)
}

fn rate(ctx: &Ctx, cfg: &RateConfig) -> Result<i32> {
    let seed = ctx.require_seed("rate")?;
    let started = manifest::unix_now();
    ctx.progress(&format!("rate experiment: {} design, d={}, {} seeds", cfg.design.name(), cfg.dim, cfg.seeds));
    let outcome = rate_experiment(seed, cfg)?;
    let dir = ctx.out_dir(PathBuf::from(DEFAULT_OUT));
    let stem = format!("rate_{}", cfg.design.name());
    let summary = outcome.summary_json()?;
    write_file(&dir.join(format!("{stem}.csv")), &outcome.to_csv())?;
    write_file(&dir.join(format!("{stem}_summary.json")), &summary)?;
    let seeds = BTreeMap::from([("seed".to_string(), seed)]);
    let results = serde_json::from_str(&summary)?;
    RunManifest::new("rate", &config_value(cfg)?, seeds, started, results).save(&dir)?;
    stdout_line(&summary);
    Ok(EXIT_OK)
}

fn analyze(ctx: &Ctx, config_path: &Path, checkpoint: Option<&Path>, pairs: usize, external_bias: f64) -> Result<i32> {
    let seed = ctx.require_seed("analyze")?;
    let started = manifest::unix_now();
    let mut config = load_config(config_path)?;
    config.run_seed = seed;
    let task = generate_task(config.task_seed, &config.task)?;
    let student: PolicyParams<f64> = match checkpoint {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            let shape = PolicyShape {
                num_prompts: task.num_prompts(),
                response_length: task.response_length,
                vocab_size: task.vocab_size(),
                rows: ckpt.shape.rows,
            };
            let backend = ckpt.backend;
            ckpt.into_params(backend, &shape)?.0
        }
        None => init_policy(&task, config.backend, seed, config.teacher_bias)?,
    };
    let external_seed = derive_seed(seed, Stream::External, &[]);
    let external: PolicyParams<f64> = init_policy(&task, config.backend, external_seed, external_bias)?;
    let report = teacher_gap_diagnostic(
        &student.student(),
        &[("contextual", student.teacher()), ("external", external.teacher())],
        &task,
        pairs,
        config.beta,
        seed,
    )?;
    let dir = ctx.out_dir(config_path.parent().map(|p| p.join(DEFAULT_OUT)).unwrap_or_else(|| DEFAULT_OUT.into()));
    write_file(&dir.join("teacher_gap.csv"), &report.to_csv())?;
    write_file(&dir.join("teacher_gap_hist.csv"), &report.histogram_csv())?;
    let results = json!(report
        .teachers
        .iter()
        .map(|t| json!({"teacher": t.teacher, "mean_curvature_weight": t.mean_curvature_weight, "lambda_min": t.lambda_min}))
        .collect::<Vec<_>>());
    let seeds = BTreeMap::from([("seed".to_string(), seed), ("task_seed".to_string(), config.task_seed)]);
    RunManifest::new("analyze", &config_value(&config)?, seeds, started, results).save(&dir)?;
    stdout_line(&report.to_csv());
    Ok(EXIT_OK)
}

fn sweep(ctx: &Ctx, config_path: &Path, betas: Vec<f64>) -> Result<i32> {
    let mut base = load_config(config_path)?;
    base.run_seed = ctx.require_seed("sweep")?;
    if betas.is_empty() {
        return Err(LabError::Config("betas must be non-empty".into()));
    }
    let root = ctx.out_dir(config_path.parent().map(|p| p.join("sweep")).unwrap_or_else(|| "sweep".into()));
    let mut table = String::from("beta,initial_expected_reward,final_expected_reward,final_tv_to_tilted\n");
    for beta in betas {
        let config = TrainConfig { beta, ..base.clone() };
        config.validate()?;
        let summary = train_one(ctx, &config, &root.join(format!("beta_{beta}")))?;
        table.push_str(&format!(
            "{beta},{},{},{}\n",
            summary["initial_expected_reward"], summary["final_expected_reward"], summary["final_tv_to_tilted"]
        ));
    }
    write_file(&root.join("sweep.csv"), &table)?;
    stdout_line(&table);
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(dispatch(["pbsd-lab", "frobnicate"]), EXIT_USAGE);
        assert_eq!(dispatch(["pbsd-lab"]), EXIT_USAGE);
        assert_eq!(dispatch(["pbsd-lab", "rate", "--d", "10"]), EXIT_USAGE);
    }

    #[test]
    fn help_exits_zero() {
        assert_eq!(dispatch(["pbsd-lab", "--help"]), EXIT_OK);
    }
}
