//! Training and evaluation runs backed by run directories.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use svmix_core::rng::{derive_seed, Stream};
use svmix_core::trainer::{evaluate, evaluate_random, utility, EpisodeMetrics, EvalStats, Observer};
use svmix_core::{Model, ParamStore, Trainer, World};

use crate::config::RunConfig;
use crate::io::{self, Checkpoint, JsonLines, MetricsRow, MetricsWriter, TrajectoryStep, VersionStamp};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub seed: u64,
    pub dir: PathBuf,
    pub episodes: usize,
    pub updates: usize,
    pub final_eval: Option<EvalStats>,
    pub training_collisions: usize,
}

struct FileObserver {
    dir: PathBuf,
    metrics: MetricsWriter,
    verbose: bool,
    n_episode: usize,
    error: Option<anyhow::Error>,
}

impl FileObserver {
    fn record(&mut self, m: &EpisodeMetrics, model: &Model) -> Result<()> {
        self.metrics.append(&MetricsRow::from(m))?;
        if m.eval.is_some() {
            let path = self.dir.join("checkpoints").join(format!("episode-{:05}.json", m.episode));
            Checkpoint::new(m.episode, model.store()).save(&path)?;
        }
        if self.verbose {
            let eval = m
                .eval
                .map(|e| format!(", eval {:.4} ± {:.4}", e.mean, e.std))
                .unwrap_or_default();
            eprintln!(
                "episode {}/{}: return {:.3}, {} steps{}{eval}",
                m.episode,
                self.n_episode,
                m.train_return,
                m.steps,
                if m.collided { ", collision" } else { "" }
            );
        }
        Ok(())
    }
}

impl Observer for FileObserver {
    fn episode(&mut self, m: &EpisodeMetrics, model: &Model) -> svmix_core::Result<()> {
        self.record(m, model).map_err(|e| {
            let msg = format!("{e:#}");
            self.error = Some(e);
            svmix_core::Error::Observer(msg)
        })
    }

    fn abort(&mut self, model: &Model, error: &svmix_core::Error) {
        let path = self.dir.join("checkpoints").join("abort.json");
        if let Err(e) = Checkpoint::new(0, model.store()).save(&path) {
            eprintln!("warning: could not save {}: {e:#}", path.display());
        }
        eprintln!("training stopped: {error}");
    }
}

/// Trains one seed of `cfg` into `<root>/<name>/seed-<seed>/`.
pub fn train_seed(cfg: &RunConfig, seed: u64, root: &Path, verbose: bool) -> Result<TrainReport> {
    let dir = io::seed_dir(root, &cfg.name, seed);
    fs::create_dir_all(dir.join("checkpoints")).with_context(|| format!("cannot create {}", dir.display()))?;
    let mut snapshot = cfg.clone();
    snapshot.seeds = vec![seed];
    snapshot.train.seed = seed;
    io::write_json(&dir.join("config.json"), &snapshot.to_json())?;
    io::write_json(&dir.join("version.json"), &VersionStamp::current())?;

    let mut trainer = Trainer::new(snapshot.scenario.clone(), &snapshot.model, snapshot.train.clone())?;
    let mut observer = FileObserver {
        metrics: MetricsWriter::create(&dir.join("metrics.csv"))?,
        dir: dir.clone(),
        verbose,
        n_episode: snapshot.train.n_episode,
        error: None,
    };
    let summary = match trainer.run(&mut observer) {
        Ok(s) => s,
        Err(e) => {
            return Err(match observer.error.take() {
                Some(inner) => inner,
                None => anyhow::Error::new(e).context(format!("training seed {seed}")),
            })
        }
    };
    Checkpoint::new(summary.episodes.len(), trainer.model().store()).save(&dir.join("checkpoints").join("final.json"))?;
    Ok(TrainReport {
        seed,
        dir,
        episodes: summary.episodes.len(),
        updates: summary.updates,
        final_eval: summary.episodes.iter().rev().find_map(|m| m.eval),
        training_collisions: summary.episodes.iter().filter(|m| m.collided).count(),
    })
}

/// A trained model and the config it was trained under.
pub struct LoadedRun {
    pub config: RunConfig,
    pub model: Model,
    pub checkpoint: PathBuf,
    pub episode: usize,
}

pub fn load_run(dir: &Path, checkpoint: Option<&Path>) -> Result<LoadedRun> {
    let config = RunConfig::load(&dir.join("config.json"))?;
    let checkpoint = checkpoint
        .map(Path::to_path_buf)
        .unwrap_or_else(|| dir.join("checkpoints").join("final.json"));
    let ck = Checkpoint::load(&checkpoint)?;
    let model = Model::with_store(&config.model, &config.scenario, ck.store)
        .with_context(|| format!("{} does not fit the run's model", checkpoint.display()))?;
    Ok(LoadedRun {
        config,
        model,
        checkpoint,
        episode: ck.episode,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint: PathBuf,
    pub trained_episodes: usize,
    pub seed: u64,
    pub policy: EvalStats,
    pub random_baseline: EvalStats,
}

pub fn eval_run(run: &LoadedRun, episodes: usize, seed: u64) -> Result<EvalReport> {
    Ok(EvalReport {
        checkpoint: run.checkpoint.clone(),
        trained_episodes: run.episode,
        seed,
        policy: evaluate(&run.model, &run.config.scenario, episodes, seed)?,
        random_baseline: evaluate_random(&run.config.scenario, episodes, seed)?,
    })
}

/// Replays the evaluation episodes with the deterministic policy, writing
/// every step as one JSON line. Returns each episode's utility.
pub fn write_trajectory(run: &LoadedRun, episodes: usize, seed: u64, path: &Path) -> Result<Vec<f64>> {
    let scenario = &run.config.scenario;
    let mut out = JsonLines::create(path)?;
    let mut rng = svmix_core::rng::stream(seed, Stream::Eval, 0);
    let mut utilities = Vec::with_capacity(episodes);
    for k in 0..episodes {
        let mut world = World::new(scenario.clone(), derive_seed(seed, Stream::Eval, k as u64 + 1))?;
        let mut obs = world.observations();
        let mut rewards = Vec::new();
        while !world.is_done() {
            let (actions, _) = run.model.act(&obs, &mut rng, true)?;
            let r = world.step(&actions)?;
            rewards.push(r.reward);
            out.write(&TrajectoryStep {
                episode: k + 1,
                t: world.time(),
                reward: r.reward,
                actions,
                ids: world.vehicles().iter().map(|v| v.id).collect(),
                positions: world.positions(),
                velocities: world.velocities(),
                collision: r.collision,
            })?;
            obs = r.observations;
        }
        utilities.push(utility(&rewards, scenario.episode_len));
    }
    out.finish()?;
    Ok(utilities)
}

/// Loads just the parameters of a checkpoint file.
pub fn load_store(path: &Path) -> Result<ParamStore> {
    Ok(Checkpoint::load(path)?.store)
}
