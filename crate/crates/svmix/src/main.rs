use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use svmix::analyze::{self, GraphArg};
use svmix::config::{ConfigError, Preset, RunConfig};
use svmix::sweep::{self, SweepParam, SweepPlan};
use svmix::verify::{self, Injection, Settings};
use svmix::{io, run};
use svmix_core::ShiftVariant;

/// Cooperative PPO with stochastic graph filtered value mixing on
/// mixed-autonomy traffic.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run per seed and write metrics, checkpoints and a config snapshot.
    Train {
        /// JSON run config; the preset's defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Scenario preset used when no config file is given.
        #[arg(long, value_enum, conflicts_with = "config")]
        preset: Option<Preset>,
        /// Train only this seed instead of the config's seed list.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the number of training episodes.
        #[arg(long)]
        episodes: Option<usize>,
        /// Output root (default: $SVMIX_OUT, then the config's out_dir).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Suppress per-episode progress on stderr.
        #[arg(long)]
        quiet: bool,
    },
    /// Evaluate a trained run with the deterministic policy.
    Eval {
        /// Run directory (`<root>/<name>/seed-<seed>`).
        #[arg(long)]
        run: PathBuf,
        /// Checkpoint to load (default: checkpoints/final.json in the run).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Evaluation episodes (default: the run's eval_episodes).
        #[arg(long)]
        episodes: Option<usize>,
        /// Evaluation seed (default: the run's seed).
        #[arg(long)]
        seed: Option<u64>,
        /// Also write every step of every episode to this JSON-lines file.
        #[arg(long)]
        trajectory: Option<PathBuf>,
    },
    /// Spectral report of a graph filter under random edge sampling.
    Analyze {
        /// `complete:N`, `path:N`, or a graph JSON file {"n": .., "edges": [[i, j], ..]}.
        #[arg(long)]
        graph: GraphArg,
        /// Filter taps `h0,h1,..` or a JSON array file.
        #[arg(long, default_value = "1")]
        coeffs: String,
        /// Edge keep probability.
        #[arg(long, default_value_t = 0.7)]
        p: f64,
        #[arg(long, value_enum, default_value = "adjacency-plus-identity")]
        variant: VariantArg,
        /// Monte Carlo draws for the unbiasedness residual.
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the report here instead of stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Run the oracle checks; exits nonzero naming any failed check.
    Verify {
        /// Multiply every tolerance by this factor.
        #[arg(long, default_value_t = 1.0)]
        tol_scale: f64,
        /// Also run the learning smoke test (several minutes per seed).
        #[arg(long)]
        learning: bool,
        /// Write the per-check JSON log here (default: <out root>/verify.json).
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long, value_enum, hide = true)]
        inject: Option<Injection>,
    },
    /// Train a run for each value of one SGNN hyperparameter, as child processes.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        param: SweepParam,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        /// Concurrent child runs.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum VariantArg {
    Laplacian,
    AdjacencyPlusIdentity,
}

impl From<VariantArg> for ShiftVariant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Laplacian => ShiftVariant::Laplacian,
            VariantArg::AdjacencyPlusIdentity => ShiftVariant::AdjacencyPlusIdentity,
        }
    }
}

fn load_config(path: Option<&Path>, preset: Option<Preset>) -> Result<RunConfig> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::preset(preset.unwrap_or_default()),
    })
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn execute(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train {
            config,
            preset,
            seed,
            episodes,
            out,
            quiet,
        } => {
            let mut cfg = load_config(config.as_deref(), preset)?;
            if let Some(s) = seed {
                cfg.seeds = vec![s];
            }
            if let Some(n) = episodes {
                cfg.train.n_episode = n;
            }
            cfg.validate()?;
            let root = io::output_root(out.as_deref(), &cfg);
            for &s in &cfg.seeds {
                let report = run::train_seed(&cfg, s, &root, !quiet)?;
                print_json(&report)?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval {
            run: dir,
            checkpoint,
            episodes,
            seed,
            trajectory,
        } => {
            let loaded = run::load_run(&dir, checkpoint.as_deref())?;
            let episodes = episodes.unwrap_or(loaded.config.train.eval_episodes).max(1);
            let seed = seed.unwrap_or(loaded.config.train.seed);
            let report = run::eval_run(&loaded, episodes, seed)?;
            if let Some(path) = trajectory {
                run::write_trajectory(&loaded, episodes, seed, &path)?;
            }
            print_json(&report)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Analyze {
            graph,
            coeffs,
            p,
            variant,
            samples,
            seed,
            output,
        } => {
            let g = graph.build()?;
            let h = analyze::parse_coeffs(&coeffs)?;
            let report = analyze::analyze(&g, &h, p, variant.into(), samples, seed)?;
            match output {
                Some(path) => io::write_json(&path, &report)?,
                None => print_json(&report)?,
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify {
            tol_scale,
            learning,
            log,
            inject,
        } => {
            let settings = Settings { tol_scale, inject };
            let mut results = Vec::new();
            for check in verify::run_fast(&settings) {
                println!("{}", check.line());
                results.push(check);
            }
            if learning {
                let check = verify::learning_smoke(&settings, &[0, 1, 2], 200);
                println!("{}", check.line());
                results.push(check);
            }
            let log = log.unwrap_or_else(|| io::output_root(None, &RunConfig::default()).join("verify.json"));
            if let Some(parent) = log.parent() {
                std::fs::create_dir_all(parent).with_context(|| format!("cannot create {}", parent.display()))?;
            }
            io::write_json(&log, &results)?;
            let failed: Vec<&str> = results.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
            if failed.is_empty() {
                println!("all {} checks passed", results.len());
                Ok(ExitCode::SUCCESS)
            } else {
                eprintln!("failed checks: {}", failed.join(", "));
                Ok(ExitCode::FAILURE)
            }
        }
        Command::Sweep {
            config,
            param,
            values,
            jobs,
            out,
        } => {
            let base = RunConfig::load(&config)?;
            let root = io::output_root(out.as_deref(), &base);
            let exe = std::env::current_exe().context("cannot locate the svmix executable")?;
            let manifest = sweep::run(&SweepPlan {
                base: &base,
                param,
                values: &values,
                root: &root,
                jobs,
                exe: &exe,
            })?;
            let failed = manifest.runs.iter().filter(|r| r.exit_code != Some(0)).count();
            println!("{}", root.join(&base.name).join("manifest.json").display());
            if failed > 0 {
                eprintln!("{failed} of {} runs failed", manifest.runs.len());
                return Ok(ExitCode::FAILURE);
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ConfigError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
