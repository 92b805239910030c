//! Seeded experiment runs: metric CSVs, cross-seed summaries, checkpoints,
//! evaluation of saved policies and one-parameter sweeps.
//!
//! Output layout of a run directory:
//!
//! ```text
//! config.resolved.toml
//! seed_<s>.csv            episode,steps,reward,violations,cost,backup_steps,final_distance
//! summary.csv             episode,reward_mean,reward_std,violations_mean,violations_std,backup_steps_mean
//! checkpoints/seed_<s>/   manifest.toml plus one .bin file per network
//! ```

use std::fs::{self, File};
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::LagrangianState;
use crate::config::{ConfigError, ExperimentConfig, Override};
use crate::mlp::{Mlp, MlpError};
use crate::trainer::{EpisodeMetrics, TrainConfig, TrainError, Trainer};

pub const CHECKPOINT_FORMAT: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.toml";
pub const NETWORK_FILES: [&str; 7] = [
    "policy.bin",
    "critic_1.bin",
    "critic_2.bin",
    "target_critic_1.bin",
    "target_critic_2.bin",
    "lyapunov.bin",
    "target_lyapunov.bin",
];

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("metrics CSV: {0}")]
    Csv(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint network {file}: {source}")]
    Network { file: String, source: MlpError },
    #[error("seed series have different lengths")]
    RaggedSeries,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io { path: path.to_path_buf(), source }
}

/// Cross-seed statistics of one episode index (population standard deviation).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub episode: usize,
    pub reward_mean: f64,
    pub reward_std: f64,
    pub violations_mean: f64,
    pub violations_std: f64,
    pub backup_steps_mean: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub per_seed: Vec<(u64, Vec<EpisodeMetrics>)>,
    pub aggregate: Vec<SummaryRow>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Per-episode mean and standard deviation across seeds.
pub fn aggregate(series: &[&[EpisodeMetrics]]) -> Result<Vec<SummaryRow>, ExperimentError> {
    let Some(first) = series.first() else { return Ok(Vec::new()) };
    if series.iter().any(|s| s.len() != first.len()) {
        return Err(ExperimentError::RaggedSeries);
    }
    Ok((0..first.len())
        .map(|i| {
            let col = |f: fn(&EpisodeMetrics) -> f64| series.iter().map(|s| f(&s[i])).collect::<Vec<_>>();
            let (reward_mean, reward_std) = mean_std(&col(|m| m.reward));
            let (violations_mean, violations_std) = mean_std(&col(|m| m.violations as f64));
            let (backup_steps_mean, _) = mean_std(&col(|m| m.backup_steps as f64));
            SummaryRow { episode: first[i].episode, reward_mean, reward_std, violations_mean, violations_std, backup_steps_mean }
        })
        .collect())
}

/// Streams episode rows to a CSV file, flushing after every row.
pub struct MetricsWriter {
    inner: csv::Writer<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self, ExperimentError> {
        let file = File::create(path).map_err(io_err(path))?;
        let mut inner = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        inner.write_record(metrics_header()).map_err(csv_err)?;
        inner.flush().map_err(io_err(path))?;
        Ok(Self { inner })
    }

    pub fn write(&mut self, m: &EpisodeMetrics) -> Result<(), ExperimentError> {
        self.inner.serialize(m).map_err(csv_err)?;
        self.inner.flush().map_err(|e| ExperimentError::Csv(e.to_string()))
    }
}

fn csv_err(e: csv::Error) -> ExperimentError {
    ExperimentError::Csv(e.to_string())
}

pub fn metrics_header() -> [&'static str; 7] {
    ["episode", "steps", "reward", "violations", "cost", "backup_steps", "final_distance"]
}

pub fn summary_header() -> [&'static str; 6] {
    ["episode", "reward_mean", "reward_std", "violations_mean", "violations_std", "backup_steps_mean"]
}

fn write_rows<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<(), ExperimentError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(io_err(path))
}

fn read_rows<T: serde::de::DeserializeOwned, R: Read>(reader: R, header: &[&str]) -> Result<Vec<T>, ExperimentError> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let got = r.headers().map_err(csv_err)?.clone();
    if got.iter().ne(header.iter().copied()) {
        return Err(ExperimentError::Csv(format!("unexpected header {:?}", got.iter().collect::<Vec<_>>())));
    }
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

pub fn write_metrics_csv(path: &Path, rows: &[EpisodeMetrics]) -> Result<(), ExperimentError> {
    write_rows(path, &metrics_header(), rows)
}

pub fn read_metrics_csv<R: Read>(reader: R) -> Result<Vec<EpisodeMetrics>, ExperimentError> {
    read_rows(reader, &metrics_header())
}

pub fn write_summary_csv(path: &Path, rows: &[SummaryRow]) -> Result<(), ExperimentError> {
    write_rows(path, &summary_header(), rows)
}

pub fn read_summary_csv<R: Read>(reader: R) -> Result<Vec<SummaryRow>, ExperimentError> {
    read_rows(reader, &summary_header())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpSnapshot {
    pub frozen: bool,
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
}

/// Everything in a checkpoint besides the network weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: u32,
    pub seed: u64,
    pub episodes_done: usize,
    pub log_alpha: f64,
    pub entropy_target: f64,
    pub lagrangian: LagrangianState,
    pub gp: GpSnapshot,
    pub config: TrainConfig,
}

impl CheckpointManifest {
    pub fn parse(text: &str) -> Result<Self, ExperimentError> {
        let m: Self = toml::from_str(text).map_err(|e| ExperimentError::Checkpoint(e.to_string()))?;
        if m.format != CHECKPOINT_FORMAT {
            return Err(ExperimentError::Checkpoint(format!("unsupported format {}", m.format)));
        }
        if !m.log_alpha.is_finite() {
            return Err(ExperimentError::Checkpoint("log_alpha is not finite".into()));
        }
        let l = &m.lagrangian;
        if l.lambdas.len() != l.rho_lambda.len()
            || l.lambdas.iter().chain([&l.zeta]).any(|v| !(*v >= 0.0))
            || l.rho_lambda.iter().chain([&l.rho_zeta]).any(|v| !(*v > 0.0 && *v <= l.rho_max))
        {
            return Err(ExperimentError::Checkpoint("inconsistent multiplier state".into()));
        }
        Ok(m)
    }
}

pub fn save_checkpoint(trainer: &Trainer, dir: &Path) -> Result<(), ExperimentError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let agent = &trainer.agent;
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT,
        seed: trainer.seed(),
        episodes_done: trainer.episodes_done(),
        log_alpha: agent.temperature.log_alpha(),
        entropy_target: agent.temperature.target,
        lagrangian: agent.lagrangian.clone(),
        gp: GpSnapshot {
            frozen: trainer.gp.is_frozen(),
            inputs: trainer.gp.inputs().map(<[f64]>::to_vec).collect(),
            targets: trainer.gp.targets().map(<[f64]>::to_vec).collect(),
        },
        config: trainer.config().clone(),
    };
    let text = toml::to_string(&manifest).map_err(|e| ExperimentError::Checkpoint(e.to_string()))?;
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, text).map_err(io_err(&path))?;
    let nets = [
        &agent.policy,
        &agent.critics[0],
        &agent.critics[1],
        &agent.target_critics[0],
        &agent.target_critics[1],
        &agent.lyapunov,
        &agent.target_lyapunov,
    ];
    for (file, net) in NETWORK_FILES.iter().zip(nets) {
        let path = dir.join(file);
        fs::write(&path, net.to_bytes()).map_err(io_err(&path))?;
    }
    Ok(())
}

/// Rebuilds a non-learning [`Trainer`] from a checkpoint directory.
pub fn load_checkpoint(dir: &Path) -> Result<Trainer, ExperimentError> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let m = CheckpointManifest::parse(&text)?;
    let mut nets = Vec::with_capacity(NETWORK_FILES.len());
    for file in NETWORK_FILES {
        let path = dir.join(file);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        nets.push(Mlp::from_bytes(&bytes).map_err(|source| ExperimentError::Network { file: file.into(), source })?);
    }
    let mut trainer = Trainer::new(m.config.clone(), m.seed)?;
    let agent = &mut trainer.agent;
    let mut nets = nets.into_iter();
    let slots: [&mut Mlp; 7] = {
        let [c1, c2] = &mut agent.critics;
        let [t1, t2] = &mut agent.target_critics;
        [&mut agent.policy, c1, c2, t1, t2, &mut agent.lyapunov, &mut agent.target_lyapunov]
    };
    for (file, slot) in NETWORK_FILES.iter().zip(slots) {
        let net = nets.next().expect("one network per file");
        if !net.same_shape(slot) {
            return Err(ExperimentError::Checkpoint(format!(
                "{file} has layout {:?}, environment needs {:?}",
                net.widths(),
                slot.widths()
            )));
        }
        *slot = net;
    }
    if m.lagrangian.lambdas.len() != agent.lagrangian.lambdas.len() {
        return Err(ExperimentError::Checkpoint("multiplier count does not match the environment".into()));
    }
    agent.lagrangian = m.lagrangian;
    agent.temperature.set_log_alpha(m.log_alpha);
    agent.temperature.target = m.entropy_target;
    trainer
        .gp
        .restore(m.gp.inputs, m.gp.targets, m.gp.frozen)
        .map_err(|e| ExperimentError::Checkpoint(format!("gp: {e}")))?;
    trainer.learning = false;
    Ok(trainer)
}

/// Trains every seed in `config` and writes the run directory.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunSummary, ExperimentError> {
    config.validate()?;
    let out = &config.run.out_dir;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let snapshot = out.join("config.resolved.toml");
    fs::write(&snapshot, config.to_toml_string()?).map_err(io_err(&snapshot))?;

    let mut per_seed = Vec::with_capacity(config.run.seeds.len());
    for &seed in &config.run.seeds {
        log::info!("{}: seed {seed}", config.run.label);
        let mut writer = MetricsWriter::create(&out.join(format!("seed_{seed}.csv")))?;
        let ckpt_root = out.join("checkpoints");
        let every = config.run.checkpoint_every;
        let mut trainer = Trainer::new(config.train.clone(), seed)?;
        let mut failure: Option<ExperimentError> = None;
        let result = trainer.run(|m, tr| {
            let step = writer.write(m).and_then(|()| {
                if every > 0 && m.episode % every == 0 {
                    save_checkpoint(tr, &ckpt_root.join(format!("seed_{seed}_episode_{}", m.episode)))
                } else {
                    Ok(())
                }
            });
            step.map_err(|e| {
                let msg = e.to_string();
                failure = Some(e);
                TrainError::Config(msg)
            })
        });
        let metrics = match result {
            Ok(m) => m,
            Err(e) => return Err(failure.unwrap_or(ExperimentError::Train(e))),
        };
        save_checkpoint(&trainer, &ckpt_root.join(format!("seed_{seed}")))?;
        per_seed.push((seed, metrics));
    }
    let series: Vec<&[EpisodeMetrics]> = per_seed.iter().map(|(_, m)| m.as_slice()).collect();
    let aggregate = aggregate(&series)?;
    write_summary_csv(&out.join("summary.csv"), &aggregate)?;
    Ok(RunSummary { per_seed, aggregate })
}

/// Rolls out a saved policy without learning and writes `eval.csv` into
/// `out` (the checkpoint directory when `None`).
pub fn eval_policy(
    checkpoint: &Path,
    episodes: usize,
    deterministic: bool,
    out: Option<&Path>,
) -> Result<RunSummary, ExperimentError> {
    let mut trainer = load_checkpoint(checkpoint)?;
    trainer.deterministic = deterministic;
    let dir = out.unwrap_or(checkpoint);
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut writer = MetricsWriter::create(&dir.join("eval.csv"))?;
    let mut metrics = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let m = trainer.episode_rollout()?;
        writer.write(&m)?;
        metrics.push(m);
    }
    let aggregate = aggregate(&[metrics.as_slice()])?;
    Ok(RunSummary { per_seed: vec![(trainer.seed(), metrics)], aggregate })
}

/// Runs `base` once per value of `param`, each in its own subdirectory.
pub fn sweep(
    base: &ExperimentConfig,
    param: &str,
    values: &[String],
) -> Result<Vec<(String, RunSummary)>, ExperimentError> {
    if values.is_empty() {
        return Err(ConfigError::Invalid("sweep needs at least one value".into()).into());
    }
    if param.starts_with("run.") {
        return Err(ConfigError::Invalid(format!("cannot sweep over run setting `{param}`")).into());
    }
    let mut variants = Vec::with_capacity(values.len());
    for v in values {
        let mut cfg = base.with_overrides(&[Override::parse(param, v)?])?;
        let tag = format!("{param}={v}");
        cfg.run.out_dir = base.run.out_dir.join(sanitize(&tag));
        cfg.run.label = format!("{} {tag}", base.run.label);
        variants.push((v.clone(), cfg));
    }
    let mut results = Vec::with_capacity(variants.len());
    for (v, cfg) in variants {
        results.push((v, run_experiment(&cfg)?));
    }
    let index = base.run.out_dir.join("sweep.csv");
    let mut text = String::from("value,dir\n");
    for (v, _) in &results {
        text.push_str(&format!("{},{}\n", csv_field(v), sanitize(&format!("{param}={v}"))));
    }
    fs::write(&index, text).map_err(io_err(&index))?;
    Ok(results)
}

fn sanitize(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || "._=-".contains(c) { c } else { '_' }).collect()
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
