//! Run directories and the files written into them.
//!
//! ```text
//! <root>/<name>/seed-<seed>/
//!     config.json          resolved config, reloadable as-is
//!     version.json         package version and git description
//!     metrics.csv          one row per training episode
//!     checkpoints/episode-<n>.json, final.json
//! ```

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use svmix_core::trainer::EpisodeMetrics;
use svmix_core::ParamStore;

use crate::config::RunConfig;

pub const OUT_ENV: &str = "SVMIX_OUT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Metrics columns, in file order.
pub const METRICS_HEADER: [&str; 8] = [
    "episode",
    "train_return",
    "eval_utility_mean",
    "eval_utility_std",
    "actor_loss",
    "critic_loss",
    "collisions",
    "updates",
];

/// Output root: the explicit flag, then `SVMIX_OUT`, then the config.
pub fn output_root(flag: Option<&Path>, cfg: &RunConfig) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    match std::env::var_os(OUT_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => cfg.out_dir.clone(),
    }
}

pub fn seed_dir(root: &Path, name: &str, seed: u64) -> PathBuf {
    root.join(name).join(format!("seed-{seed}"))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VersionStamp {
    pub package: String,
    pub git: String,
}

impl VersionStamp {
    pub fn current() -> Self {
        VersionStamp {
            package: env!("CARGO_PKG_VERSION").into(),
            git: env!("SVMIX_GIT_DESCRIBE").into(),
        }
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("cannot parse {}", path.display()))
}

/// One row of `metrics.csv`. Evaluation and loss columns are empty when not
/// measured in that episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub episode: usize,
    pub train_return: f64,
    pub eval_utility_mean: Option<f64>,
    pub eval_utility_std: Option<f64>,
    pub actor_loss: Option<f64>,
    pub critic_loss: Option<f64>,
    /// Training-episode collisions (0 or 1).
    pub collisions: usize,
    /// Update rounds fired during the episode.
    pub updates: usize,
}

impl From<&EpisodeMetrics> for MetricsRow {
    fn from(m: &EpisodeMetrics) -> Self {
        MetricsRow {
            episode: m.episode,
            train_return: m.train_return,
            eval_utility_mean: m.eval.map(|e| e.mean),
            eval_utility_std: m.eval.map(|e| e.std),
            actor_loss: m.actor_loss,
            critic_loss: m.critic_loss,
            collisions: m.collided as usize,
            updates: m.updates,
        }
    }
}

pub struct MetricsWriter {
    inner: csv::Writer<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let mut inner = csv::WriterBuilder::new()
            .has_headers(false)
            .from_path(path)
            .with_context(|| format!("cannot create {}", path.display()))?;
        inner.write_record(METRICS_HEADER)?;
        inner.flush()?;
        Ok(MetricsWriter { inner })
    }

    pub fn append(&mut self, row: &MetricsRow) -> Result<()> {
        self.inner.serialize(row)?;
        self.inner.flush()?;
        Ok(())
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("cannot read {}", path.display()))?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != METRICS_HEADER {
        bail!("{}: unexpected header {header:?}", path.display());
    }
    r.deserialize().map(|row| row.map_err(Into::into)).collect()
}

/// Parameters plus their layout, written with round-trip float formatting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    /// Training episodes completed when the checkpoint was taken.
    pub episode: usize,
    #[serde(flatten)]
    pub store: ParamStore,
}

impl Checkpoint {
    pub fn new(episode: usize, store: &ParamStore) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            episode,
            store: store.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut ck: Checkpoint = read_json(path)?;
        if ck.version != CHECKPOINT_VERSION {
            bail!("{}: unsupported checkpoint version {}", path.display(), ck.version);
        }
        ck.store
            .finish_load()
            .with_context(|| format!("{}: malformed parameter layout", path.display()))?;
        Ok(ck)
    }
}

/// One simulator step for trajectory files (JSON lines).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub episode: usize,
    pub t: usize,
    pub reward: f64,
    pub actions: Vec<f64>,
    pub ids: Vec<u64>,
    pub positions: Vec<f64>,
    pub velocities: Vec<f64>,
    pub collision: bool,
}

pub struct JsonLines<W: Write> {
    inner: W,
}

impl JsonLines<BufWriter<File>> {
    pub fn create(path: &Path) -> Result<Self> {
        let f = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
        Ok(JsonLines {
            inner: BufWriter::new(f),
        })
    }
}

impl<W: Write> JsonLines<W> {
    pub fn new(inner: W) -> Self {
        JsonLines { inner }
    }

    pub fn write<T: Serialize>(&mut self, value: &T) -> Result<()> {
        serde_json::to_writer(&mut self.inner, value)?;
        self.inner.write_all(b"\n")?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        self.inner.flush()?;
        Ok(self.inner)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use svmix_core::trainer::EvalStats;

    #[test]
    fn metrics_rows_leave_missing_columns_empty() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        let mut w = MetricsWriter::create(&path).unwrap();
        let mut m = EpisodeMetrics {
            episode: 1,
            train_return: 2.5,
            steps: 10,
            collided: false,
            eval: None,
            actor_loss: None,
            critic_loss: None,
            updates: 0,
            update_steps: vec![],
            clamped_actions: 0,
        };
        w.append(&MetricsRow::from(&m)).unwrap();
        m.episode = 2;
        m.eval = Some(EvalStats {
            mean: 0.1,
            std: 0.01,
            episodes: 2,
            collisions: 0,
        });
        m.actor_loss = Some(-0.25);
        m.critic_loss = Some(0.5);
        m.collided = true;
        m.updates = 2;
        w.append(&MetricsRow::from(&m)).unwrap();
        drop(w);
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(
            text,
            "episode,train_return,eval_utility_mean,eval_utility_std,actor_loss,critic_loss,collisions,updates\n\
             1,2.5,,,,,0,0\n\
             2,2.5,0.1,0.01,-0.25,0.5,1,2\n"
        );
        let rows = read_metrics(&path).unwrap();
        assert_eq!(rows[1], MetricsRow::from(&m));
    }
}
