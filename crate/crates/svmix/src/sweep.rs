//! One-factor hyperparameter sweeps over `p`, `K` or `F`, run as child
//! `svmix train` processes.

use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use svmix_core::graph::Probability;

use crate::config::RunConfig;
use crate::io;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    /// RES keep probability.
    P,
    /// Filter order.
    K,
    /// Filter count.
    F,
}

impl SweepParam {
    /// Copy of `base` with this parameter set to `value`.
    pub fn apply(self, base: &RunConfig, value: f64) -> Result<RunConfig> {
        let mut cfg = base.clone();
        let count = || -> Result<usize> {
            if value < 0.0 || value.fract() != 0.0 {
                bail!("{self:?} takes non-negative integers, got {value}");
            }
            Ok(value as usize)
        };
        match self {
            SweepParam::P => cfg.model.sgnn.p = Probability::new(value)?,
            SweepParam::K => cfg.model.sgnn.order = count()?,
            SweepParam::F => cfg.model.sgnn.filters = count()?,
        }
        cfg.name = format!("{}-{}-{value}", base.name, self.label());
        cfg.validate()?;
        Ok(cfg)
    }

    fn label(self) -> &'static str {
        match self {
            SweepParam::P => "p",
            SweepParam::K => "k",
            SweepParam::F => "f",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub episode: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub value: f64,
    pub seed: u64,
    pub config: PathBuf,
    pub dir: PathBuf,
    pub exit_code: Option<i32>,
    /// Evaluation windows read back from the run's metrics.
    pub evals: Vec<EvalPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub param: SweepParam,
    pub values: Vec<f64>,
    pub version: io::VersionStamp,
    pub base: serde_json::Value,
    pub runs: Vec<SweepRun>,
}

pub struct SweepPlan<'a> {
    pub base: &'a RunConfig,
    pub param: SweepParam,
    pub values: &'a [f64],
    pub root: &'a Path,
    pub jobs: usize,
    /// The `svmix` executable to launch.
    pub exe: &'a Path,
}

/// Runs every (value, seed) pair and writes `<root>/<name>/manifest.json`.
pub fn run(plan: &SweepPlan<'_>) -> Result<Manifest> {
    if plan.values.is_empty() {
        bail!("a sweep needs at least one value");
    }
    let sweep_dir = plan.root.join(&plan.base.name);
    let configs_dir = sweep_dir.join("configs");
    let runs_root = sweep_dir.join("runs");
    std::fs::create_dir_all(&configs_dir).with_context(|| format!("cannot create {}", configs_dir.display()))?;

    let mut runs = Vec::new();
    for &value in plan.values {
        let cfg = plan.param.apply(plan.base, value)?;
        for &seed in &cfg.seeds {
            let mut single = cfg.clone();
            single.seeds = vec![seed];
            let path = configs_dir.join(format!("{}-seed-{seed}.json", cfg.name));
            io::write_json(&path, &single.to_json())?;
            runs.push(SweepRun {
                value,
                seed,
                config: path,
                dir: io::seed_dir(&runs_root, &cfg.name, seed),
                exit_code: None,
                evals: Vec::new(),
            });
        }
    }

    let jobs = plan.jobs.max(1);
    let mut running: Vec<(usize, Child)> = Vec::new();
    let mut next = 0;
    while next < runs.len() || !running.is_empty() {
        while running.len() < jobs && next < runs.len() {
            let child = Command::new(plan.exe)
                .arg("train")
                .arg("--config")
                .arg(&runs[next].config)
                .arg("--out")
                .arg(&runs_root)
                .arg("--quiet")
                .stdout(Stdio::null())
                .spawn()
                .with_context(|| format!("cannot launch {}", plan.exe.display()))?;
            running.push((next, child));
            next += 1;
        }
        let (idx, mut child) = running.remove(0);
        let status = child.wait()?;
        runs[idx].exit_code = status.code();
    }

    for r in &mut runs {
        let metrics = r.dir.join("metrics.csv");
        if r.exit_code == Some(0) {
            r.evals = io::read_metrics(&metrics)?
                .into_iter()
                .filter_map(|m| {
                    Some(EvalPoint {
                        episode: m.episode,
                        mean: m.eval_utility_mean?,
                        std: m.eval_utility_std?,
                    })
                })
                .collect();
        }
    }
    let manifest = Manifest {
        name: plan.base.name.clone(),
        param: plan.param,
        values: plan.values.to_vec(),
        version: io::VersionStamp::current(),
        base: plan.base.to_json(),
        runs,
    };
    io::write_json(&sweep_dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}
