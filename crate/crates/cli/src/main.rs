//! Command-line shell around the library commands.
//!
//! Exit codes: 0 success, 2 configuration fault, 3 runtime fault, 4
//! numerical abort.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cil_lab::checks::{run_gradcheck, run_selftest};
use cil_lab::commands::{cmd_ablate, cmd_analyze, cmd_generate, cmd_train, parse_sweep_axis};
use cil_lab::config::{
    load_config, parse_measurement, parse_method, parse_rd_pairing, parse_strategy,
    ExperimentConfig, Overrides,
};
use cil_lab::runner::resume_one;
use cil_lab::{exit_code_for, Result};

/// Environment variable overriding the output directory.
const OUT_ENV: &str = "CIL_LAB_OUT";

#[derive(Parser)]
#[command(name = "cil-lab", version, about = "Desk-scale incremental-learning experiments")]
struct Cli {
    /// JSON experiment config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (beats the env var and the config field).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone, Default)]
struct OverrideArgs {
    /// Baseline selector: naive (forces η to 0) or clad.
    #[arg(long)]
    method: Option<String>,
    /// Disentanglement weight η.
    #[arg(long)]
    eta: Option<f64>,
    /// Conflict proportion P in (0, 1].
    #[arg(long)]
    proportion: Option<f64>,
    /// Conflict selection: top, smallest, or random.
    #[arg(long)]
    strategy: Option<String>,
    /// Replay budget per class.
    #[arg(long)]
    exemplars: Option<usize>,
    /// Run a single replicate with this root seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Similarity source: logits, cosine, or oracle_logits.
    #[arg(long)]
    measurement: Option<String>,
    /// Term pairing: text or literal.
    #[arg(long)]
    rd_pairing: Option<String>,
}

impl OverrideArgs {
    fn resolve(&self) -> Result<Overrides> {
        Ok(Overrides {
            method: self.method.as_deref().map(parse_method).transpose()?,
            eta: self.eta,
            proportion: self.proportion,
            strategy: self.strategy.as_deref().map(parse_strategy).transpose()?,
            exemplars: self.exemplars,
            seed: self.seed,
            measurement: self
                .measurement
                .as_deref()
                .map(parse_measurement)
                .transpose()?,
            rd_pairing: self
                .rd_pairing
                .as_deref()
                .map(parse_rd_pairing)
                .transpose()?,
        })
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the synthetic dataset (CSVs, prototypes, collision audit).
    Generate,
    /// Run every replicate seed and persist bundles plus a summary.
    Train {
        /// Also save a resumable checkpoint after every task.
        #[arg(long)]
        checkpoints: bool,
        /// Continue a single interrupted run from this checkpoint file.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        overrides: OverrideArgs,
    },
    /// Sweep one axis: strategy, proportion, eta, exemplars, or measurement.
    Ablate {
        #[arg(long)]
        sweep: String,
        #[command(flatten)]
        overrides: OverrideArgs,
    },
    /// Recompute forgetting analyses for a finished training directory.
    Analyze,
    /// Finite-difference sweep over every differentiable operation.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 1e-6)]
        tolerance: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Quick end-to-end invariant exercise.
    Selftest,
}

fn load(cli_config: &Option<PathBuf>) -> Result<ExperimentConfig> {
    match cli_config {
        Some(path) => load_config(path),
        None => Ok(ExperimentConfig::default()),
    }
}

fn out_dir(cli: &Option<PathBuf>, cfg: &ExperimentConfig) -> PathBuf {
    cli.clone()
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Generate => {
            let cfg = load(&cli.config)?;
            let out = out_dir(&cli.out, &cfg);
            let paths = cmd_generate(&cfg, &out)?;
            println!("wrote {}", paths.train_csv.display());
            println!("wrote {}", paths.test_csv.display());
            println!("wrote {}", paths.prototypes_json.display());
            println!("wrote {}", paths.collision_audit_csv.display());
        }
        Cmd::Train {
            checkpoints,
            resume,
            overrides,
        } => {
            let mut cfg = load(&cli.config)?;
            overrides.resolve()?.apply(&mut cfg);
            let out = out_dir(&cli.out, &cfg);
            if let Some(path) = resume {
                let bundle = resume_one(&cfg, &path)?;
                let dir = out.join(format!("seed-{}", bundle.seed));
                std::fs::create_dir_all(&dir)?;
                std::fs::write(dir.join("bundle.json"), bundle.to_json()?)?;
                println!(
                    "resumed seed {} to {} tasks, avg incremental accuracy {:.4}",
                    bundle.seed,
                    bundle.record.outcomes.len(),
                    bundle.avg_incremental_accuracy
                );
            } else {
                let result = cmd_train(&cfg, &out, checkpoints)?;
                println!(
                    "{} seeds -> {}; avg incremental accuracy {:.4} ± {:.4}",
                    result.bundles.len(),
                    result.out_dir.display(),
                    result.summary.avg_incremental_accuracy.mean,
                    result.summary.avg_incremental_accuracy.std
                );
            }
        }
        Cmd::Ablate { sweep, overrides } => {
            let mut cfg = load(&cli.config)?;
            overrides.resolve()?.apply(&mut cfg);
            let axis = parse_sweep_axis(&sweep)?;
            let out = out_dir(&cli.out, &cfg);
            let table = cmd_ablate(&cfg, axis, &out)?;
            for row in &table.rows {
                println!(
                    "{}={:<14} avg incremental accuracy {:.4} ± {:.4}",
                    table.axis,
                    row.label,
                    row.avg_incremental_accuracy.mean,
                    row.avg_incremental_accuracy.std
                );
            }
        }
        Cmd::Analyze => {
            let cfg = load(&cli.config)?;
            let out = out_dir(&cli.out, &cfg);
            let report = cmd_analyze(&out)?;
            for (seed, analysis) in &report.per_seed {
                match analysis {
                    Some(a) => {
                        let r = a
                            .correlation_max
                            .as_ref()
                            .map(|c| format!("r={:.3} p={:.4}", c.r, c.permutation_p))
                            .unwrap_or_else(|| "correlation undefined".into());
                        println!("seed {seed}: {r}");
                    }
                    None => println!("seed {seed}: single-task run, nothing to analyze"),
                }
            }
            if let Some(c) = &report.pooled_max {
                println!(
                    "pooled (max aggregation): r={:.3} p={:.4} over {} pairs",
                    c.r, c.permutation_p, c.n
                );
            }
        }
        Cmd::Gradcheck {
            instances,
            tolerance,
            seed,
        } => {
            let report = run_gradcheck(instances, tolerance, seed)?;
            for op in &report.ops {
                println!(
                    "{:<20} {} instances, max rel err {:.3e}",
                    op.op, op.instances, op.max_rel_err
                );
            }
            if !report.passes() {
                return Err(cil_lab::Error::NonFinite {
                    context: format!("gradient check exceeded tolerance {tolerance:e}"),
                });
            }
            println!("all operations within {tolerance:e}");
        }
        Cmd::Selftest => {
            for check in run_selftest()? {
                println!("ok: {:<22} {}", check.name, check.detail);
            }
            println!("selftest passed");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e) as u8)
        }
    }
}
