//! End-to-end experiment driver: generate, train, attack and analyze every
//! configuration of a grid, resuming from whatever a previous invocation
//! left on disk.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analytics::{analyze_config, redundancy_csv, redundancy_summary, write_config_analysis, RedundancySummary};
use crate::attack::{
    read_records, read_summary, run_exhaustive_attack, write_records, write_summary, AttackMode, AttackRecord,
    AttackSummary,
};
use crate::error::{Error, Result};
use crate::fsutil::{atomic_write, read_json, sha256_hex, write_json};
use crate::layout::ConfigLayout;
use crate::linegen::{self, Dataset};
use crate::trainer::{
    existing_run, load_or_generate, load_run, save_run, train_model_with, write_manifest, CheckpointMeta, RunEntry,
    TrainConfig,
};

/// Every field of [`TrainConfig`] except the seed, all optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOverrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adam_epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dropout_p: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_epochs: Option<usize>,
}

impl TrainOverrides {
    pub fn apply(&self, seed: u64) -> TrainConfig {
        let d = TrainConfig::default();
        TrainConfig {
            learning_rate: self.learning_rate.unwrap_or(d.learning_rate),
            beta1: self.beta1.unwrap_or(d.beta1),
            beta2: self.beta2.unwrap_or(d.beta2),
            adam_epsilon: self.adam_epsilon.unwrap_or(d.adam_epsilon),
            dropout_p: self.dropout_p.unwrap_or(d.dropout_p),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            max_epochs: self.max_epochs.unwrap_or(d.max_epochs),
            seed,
        }
    }
}

fn default_dims() -> Vec<usize> {
    vec![16, 32, 48, 64, 80]
}
fn default_steps() -> Vec<f64> {
    vec![0.5, 1.0, 2.0]
}
fn default_models() -> usize {
    5
}
fn default_seed() -> u64 {
    1
}
fn default_incremental_from() -> usize {
    64
}
fn default_out() -> PathBuf {
    PathBuf::from("lpx-out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_dims")]
    pub dims: Vec<usize>,
    #[serde(default = "default_steps")]
    pub angle_steps: Vec<f64>,
    #[serde(default = "default_models")]
    pub models_per_config: usize,
    /// Model `k` of a configuration is trained with seed `base_seed + k`.
    #[serde(default = "default_seed")]
    pub base_seed: u64,
    #[serde(default)]
    pub train: TrainOverrides,
    /// Forces one attack path for every dimension.
    #[serde(default)]
    pub attack_mode: Option<AttackMode>,
    /// Without `attack_mode`, dimensions from this size up use the
    /// incremental path and smaller ones the full network.
    #[serde(default = "default_incremental_from")]
    pub incremental_from_dim: usize,
    /// Dimensions up to this size are attacked a second time with the other
    /// path and the two record files compared.
    #[serde(default)]
    pub cross_check_max_dim: usize,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    /// Worker threads; does not affect any output.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dims.is_empty() || self.angle_steps.is_empty() {
            return Err(Error::InvalidConfig("dims and angle_steps must be non-empty".into()));
        }
        if self.models_per_config == 0 {
            return Err(Error::InvalidConfig("models_per_config must be at least 1".into()));
        }
        if self.workers == Some(0) {
            return Err(Error::InvalidConfig("workers must be at least 1".into()));
        }
        for &d in &self.dims {
            for &s in &self.angle_steps {
                linegen::validate_config(d, s)?;
            }
        }
        self.train.apply(self.base_seed).validate()?;
        std::fs::create_dir_all(&self.out).map_err(|e| Error::io(&self.out, e))?;
        let probe = self.out.join(".write-probe");
        std::fs::write(&probe, b"").map_err(|e| Error::io(&probe, e))?;
        let _ = std::fs::remove_file(&probe);
        Ok(())
    }

    pub fn mode_for(&self, dim: usize) -> AttackMode {
        self.attack_mode.unwrap_or(if dim >= self.incremental_from_dim {
            AttackMode::IncrementalVerified
        } else {
            AttackMode::Full
        })
    }

    /// SHA-256 of the settings that influence outputs (everything except
    /// the output root and the worker count).
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out = PathBuf::new();
        c.workers = None;
        sha256_hex(&serde_json::to_vec(&c).expect("config serializes"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepStatus {
    Success,
    PartialFailure,
    NonConvergence,
}

impl SweepStatus {
    pub fn exit_code(self) -> i32 {
        match self {
            SweepStatus::Success => 0,
            SweepStatus::PartialFailure => 2,
            SweepStatus::NonConvergence => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageFailure {
    pub stage: String,
    pub config: String,
    pub seed: Option<u64>,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossCheck {
    pub mode: AttackMode,
    pub checkpoint_sha256: String,
    pub records_sha256: String,
    pub identical: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub mode: AttackMode,
    pub records: String,
    pub records_sha256: String,
    pub adversarial_count: u64,
    pub candidates_total: u64,
    pub ratio: f64,
    pub cross_check: Option<CrossCheck>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub seed: u64,
    pub model_id: String,
    pub checkpoint: String,
    pub checkpoint_sha256: String,
    pub converged: bool,
    pub epochs: usize,
    pub final_accuracy: f64,
    pub attack: Option<AttackReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigReport {
    pub name: String,
    pub dim: usize,
    pub angle_step_deg: f64,
    pub n_images: usize,
    pub conflicts: u32,
    pub label_counts: [usize; 2],
    pub dataset_digest: String,
    pub models: Vec<ModelReport>,
    pub overall_ratio: Option<f64>,
    pub boundary_share_6deg: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Convergence {
    pub runs: usize,
    pub converged: usize,
    pub not_converged: Vec<String>,
}

/// Contents of `report.json` at the output root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub configs: Vec<ConfigReport>,
    pub convergence: Convergence,
    pub redundancy: Option<RedundancySummary>,
    pub failures: Vec<StageFailure>,
    pub status: SweepStatus,
}

impl SweepReport {
    pub fn config(&self, dim: usize, step: f64) -> Option<&ConfigReport> {
        self.configs.iter().find(|c| c.dim == dim && c.angle_step_deg == step)
    }
}

/// Wall-clock time of one stage. Kept out of `report.json` so the report
/// stays byte-identical across reruns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub config: String,
    pub seed: Option<u64>,
    pub seconds: f64,
    pub reused: bool,
}

/// Which pipeline stages to execute. A disabled stage falls back to the
/// artifacts a previous run left on disk and records a failure if they are
/// missing or stale.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stages {
    pub train: bool,
    pub attack: bool,
    pub analyze: bool,
}

impl Stages {
    pub const ALL: Stages = Stages {
        train: true,
        attack: true,
        analyze: true,
    };
    pub const GENERATE: Stages = Stages {
        train: false,
        attack: false,
        analyze: false,
    };
    pub const TRAIN: Stages = Stages {
        train: true,
        attack: false,
        analyze: false,
    };
    pub const ATTACK: Stages = Stages {
        train: false,
        attack: true,
        analyze: false,
    };
    pub const ANALYZE: Stages = Stages {
        train: false,
        attack: false,
        analyze: true,
    };
}

pub fn model_id(layout: &ConfigLayout, seed: u64) -> String {
    format!("{}_seed{seed}", layout.name())
}

pub fn crosscheck_records(layout: &ConfigLayout, seed: u64, mode: AttackMode) -> PathBuf {
    layout.dir.join("attacks").join(format!("seed{seed}.{}.csv", mode.as_str()))
}

fn crosscheck_meta(layout: &ConfigLayout, seed: u64) -> PathBuf {
    layout.dir.join("attacks").join(format!("seed{seed}.crosscheck.json"))
}

fn file_sha(path: &Path) -> Option<String> {
    std::fs::read(path).ok().map(|b| sha256_hex(&b))
}

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    stages: Stages,
    failures: Vec<StageFailure>,
    timings: Vec<StageTiming>,
}

impl Ctx<'_> {
    fn fail(&mut self, stage: &str, config: &str, seed: Option<u64>, e: &Error) {
        log::error!("{stage} {config} {seed:?}: {e}");
        self.failures.push(StageFailure {
            stage: stage.into(),
            config: config.into(),
            seed,
            error: e.to_string(),
        });
    }

    fn time(&mut self, stage: &str, config: &str, seed: Option<u64>, start: Instant, reused: bool) {
        self.timings.push(StageTiming {
            stage: stage.into(),
            config: config.into(),
            seed,
            seconds: start.elapsed().as_secs_f64(),
            reused,
        });
    }
}

/// Runs the whole grid and writes `report.json` (plus `timings.json`).
/// Invalid configurations are rejected before anything is written.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<SweepReport> {
    let (report, mut timings) = run_stages(cfg, Stages::ALL)?;
    let timings_path = cfg.out.join("timings.json");
    // a reused stage keeps the time it took when it actually ran
    if let Ok(previous) = read_json::<Vec<StageTiming>>(&timings_path) {
        for t in timings.iter_mut().filter(|t| t.reused) {
            if let Some(old) = previous
                .iter()
                .find(|o| !o.reused && o.stage == t.stage && o.config == t.config && o.seed == t.seed)
            {
                *t = old.clone();
            }
        }
    }
    write_json(&cfg.out.join("report.json"), &report)?;
    write_json(&timings_path, &timings)?;
    Ok(report)
}

/// Runs the selected stages over the grid without writing the top-level
/// report.
pub fn run_stages(cfg: &ExperimentConfig, stages: Stages) -> Result<(SweepReport, Vec<StageTiming>)> {
    cfg.validate()?;
    let root = cfg.out.clone();
    let mut ctx = Ctx {
        cfg,
        stages,
        failures: Vec::new(),
        timings: Vec::new(),
    };
    let mut configs = Vec::new();
    let mut analyzed: Vec<(usize, f64, usize, f64)> = Vec::new();
    for &dim in &cfg.dims {
        for &step in &cfg.angle_steps {
            let layout = ConfigLayout::new(&root, dim, step)?;
            if let Some(rep) = run_config(&mut ctx, &layout) {
                if let Some(r) = rep.overall_ratio {
                    analyzed.push((dim, step, rep.n_images, r));
                }
                configs.push(rep);
            }
        }
    }

    let redundancy = if stages.analyze && analyzed.len() >= 2 {
        match redundancy_summary(&analyzed) {
            Ok(r) => {
                let dir = root.join("analysis");
                atomic_write(&dir.join("redundancy.csv"), redundancy_csv(&r).as_bytes())?;
                write_json(&dir.join("redundancy.json"), &r)?;
                Some(r)
            }
            Err(e) => {
                ctx.fail("analyze", "redundancy", None, &e);
                None
            }
        }
    } else {
        None
    };

    let runs: Vec<RunEntry> = configs
        .iter()
        .flat_map(|c| {
            let timings = &ctx.timings;
            c.models.iter().map(move |m| RunEntry {
                dim: c.dim,
                step: c.angle_step_deg,
                seed: m.seed,
                dataset_digest: c.dataset_digest.clone(),
                checkpoint_path: m.checkpoint.clone(),
                converged: m.converged,
                final_accuracy: m.final_accuracy,
                epochs: m.epochs,
                trained_now: timings
                    .iter()
                    .any(|t| t.stage == "train" && t.config == c.name && t.seed == Some(m.seed) && !t.reused),
            })
        })
        .collect();
    if !runs.is_empty() {
        write_manifest(&root, runs)?;
    }

    let models: Vec<&ModelReport> = configs.iter().flat_map(|c| c.models.iter()).collect();
    let convergence = Convergence {
        runs: models.len(),
        converged: models.iter().filter(|m| m.converged).count(),
        not_converged: models.iter().filter(|m| !m.converged).map(|m| m.model_id.clone()).collect(),
    };
    let status = if !ctx.failures.is_empty() {
        SweepStatus::PartialFailure
    } else if !convergence.not_converged.is_empty() {
        SweepStatus::NonConvergence
    } else {
        SweepStatus::Success
    };
    let report = SweepReport {
        config_hash: cfg.hash(),
        config: cfg.clone(),
        configs,
        convergence,
        redundancy,
        failures: ctx.failures,
        status,
    };
    Ok((report, ctx.timings))
}

fn run_config(ctx: &mut Ctx<'_>, layout: &ConfigLayout) -> Option<ConfigReport> {
    let name = layout.name();
    let t = Instant::now();
    let reused = layout.dataset().exists();
    let ds = match load_or_generate(layout) {
        Ok(ds) => ds,
        Err(e) => {
            ctx.fail("generate", &name, None, &e);
            return None;
        }
    };
    ctx.time("generate", &name, None, t, reused);
    log::info!("{name}: {} images", ds.len());

    let seeds: Vec<u64> = if ctx.stages == Stages::GENERATE {
        Vec::new()
    } else {
        (0..ctx.cfg.models_per_config as u64).map(|k| ctx.cfg.base_seed + k).collect()
    };
    let trained = train_seeds(ctx, layout, &ds, &seeds);

    let mut models = Vec::new();
    let mut attacked: Vec<(AttackSummary, Vec<AttackRecord>)> = Vec::new();
    for (seed, outcome) in seeds.iter().copied().zip(trained) {
        let (meta, secs, reused) = match outcome {
            Ok(x) => x,
            Err(e) => {
                ctx.fail("train", &name, Some(seed), &e);
                continue;
            }
        };
        ctx.timings.push(StageTiming {
            stage: "train".into(),
            config: name.clone(),
            seed: Some(seed),
            seconds: secs,
            reused,
        });
        let ckpt = layout.checkpoint(seed);
        let mut report = ModelReport {
            seed,
            model_id: model_id(layout, seed),
            checkpoint: layout.relative(&ckpt),
            checkpoint_sha256: meta.checkpoint_sha256.clone(),
            converged: meta.converged,
            epochs: meta.epochs,
            final_accuracy: meta.final_accuracy,
            attack: None,
        };
        if meta.converged && (ctx.stages.attack || ctx.stages.analyze) {
            match attack_seed(ctx, layout, &ds, seed, &meta) {
                Ok((a, summary, records)) => {
                    report.attack = Some(a);
                    attacked.push((summary, records));
                }
                Err(e) => ctx.fail("attack", &name, Some(seed), &e),
            }
        } else if !meta.converged {
            log::warn!("{} did not converge; not attacked", report.model_id);
        }
        models.push(report);
    }

    let mut overall_ratio = None;
    let mut boundary_share = None;
    if ctx.stages.analyze && !attacked.is_empty() {
        let t = Instant::now();
        match analyze_config(&ds, &attacked)
            .and_then(|(a, p, h)| write_config_analysis(&layout.analysis_dir(), &a, &p, &h).map(|_| a))
        {
            Ok(a) => {
                overall_ratio = Some(a.overall_ratio);
                boundary_share = a.boundary_share_6deg;
            }
            Err(e) => ctx.fail("analyze", &name, None, &e),
        }
        ctx.time("analyze", &name, None, t, false);
    }
    Some(ConfigReport {
        name,
        dim: ds.dim,
        angle_step_deg: ds.angle_step_deg(),
        n_images: ds.len(),
        conflicts: ds.conflict_count,
        label_counts: ds.label_counts(),
        dataset_digest: ds.content_hash.clone(),
        models,
        overall_ratio,
        boundary_share_6deg: boundary_share,
    })
}

type TrainOutcome = Result<(CheckpointMeta, f64, bool)>;

fn train_seeds(ctx: &Ctx<'_>, layout: &ConfigLayout, ds: &Dataset, seeds: &[u64]) -> Vec<TrainOutcome> {
    let work = |seed: u64| -> TrainOutcome {
        let config = ctx.cfg.train.apply(seed);
        let ckpt = layout.checkpoint(seed);
        if let Some(meta) = existing_run(&ckpt, &ds.content_hash, &config) {
            return Ok((meta, 0.0, true));
        }
        if !ctx.stages.train {
            return Err(Error::MissingArtifact(format!("{}: no matching checkpoint", ckpt.display())));
        }
        let t = Instant::now();
        let tag = model_id(layout, seed);
        log::info!("training {tag}");
        let run = train_model_with(ds, &config, |epoch, s| {
            log::debug!("{tag} epoch {epoch}: loss {:.6} acc {:.4}", s.loss, s.accuracy);
        })?;
        log::info!("{tag}: {} epochs, converged {}", run.history.len(), run.converged);
        let meta = save_run(&run, layout.step_deg(), &ckpt)?;
        Ok((meta, t.elapsed().as_secs_f64(), false))
    };
    let n = ctx.cfg.workers.unwrap_or_else(rayon::current_num_threads);
    if n <= 1 {
        return seeds.iter().map(|&s| work(s)).collect();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
        Ok(pool) => pool.install(|| seeds.par_iter().map(|&s| work(s)).collect()),
        Err(e) => seeds
            .iter()
            .map(|_| Err(Error::InvalidConfig(format!("thread pool: {e}"))))
            .collect(),
    }
}

fn attack_seed(
    ctx: &mut Ctx<'_>,
    layout: &ConfigLayout,
    ds: &Dataset,
    seed: u64,
    meta: &CheckpointMeta,
) -> Result<(AttackReport, AttackSummary, Vec<AttackRecord>)> {
    let name = layout.name();
    let id = model_id(layout, seed);
    let mode = ctx.cfg.mode_for(ds.dim);
    let rec_path = layout.records(seed);
    let sum_path = layout.attack_summary(seed);
    let mut params = None;

    let t = Instant::now();
    let reusable = read_summary(&sum_path).ok().filter(|s| {
        s.mode == mode
            && s.model_id == id
            && s.dataset_digest == ds.content_hash
            && s.checkpoint_sha256.as_deref() == Some(meta.checkpoint_sha256.as_str())
            && s.records_sha256.is_some()
            && file_sha(&rec_path) == s.records_sha256
    });
    let (summary, records) = match reusable {
        Some(s) => {
            let records = read_records(&rec_path)?;
            ctx.time("attack", &name, Some(seed), t, true);
            (s, records)
        }
        None if !ctx.stages.attack => {
            return Err(Error::MissingArtifact(format!("{}: no matching attack records", rec_path.display())));
        }
        None => {
            let (p, m) = load_run(&layout.checkpoint(seed))?;
            if m.checkpoint_sha256 != meta.checkpoint_sha256 {
                return Err(Error::Corrupt(format!("checkpoint of {id} changed while running")));
            }
            log::info!("attacking {id} ({})", mode.as_str());
            let (records, mut summary) = run_exhaustive_attack(&p, ds, mode, &id)?;
            summary.checkpoint_sha256 = Some(meta.checkpoint_sha256.clone());
            summary.records_sha256 = Some(write_records(&rec_path, &records)?);
            write_summary(&sum_path, &summary)?;
            ctx.time("attack", &name, Some(seed), t, false);
            log::info!("{id}: {} adversarial of {}", summary.adversarial_count, summary.candidates_total);
            params = Some(p);
            (summary, records)
        }
    };
    let records_sha256 = summary.records_sha256.clone().unwrap_or_default();

    let mut cross_check = None;
    if ctx.stages.attack && ds.dim <= ctx.cfg.cross_check_max_dim {
        let other = match mode {
            AttackMode::Full => AttackMode::IncrementalVerified,
            AttackMode::IncrementalVerified => AttackMode::Full,
        };
        let path = crosscheck_records(layout, seed, other);
        let meta_path = crosscheck_meta(layout, seed);
        let t = Instant::now();
        let previous = read_json::<CrossCheck>(&meta_path).ok().filter(|c| {
            c.mode == other
                && c.checkpoint_sha256 == meta.checkpoint_sha256
                && file_sha(&path).as_deref() == Some(c.records_sha256.as_str())
        });
        let check = match previous {
            Some(c) => {
                ctx.time("cross_check", &name, Some(seed), t, true);
                CrossCheck {
                    identical: c.records_sha256 == records_sha256,
                    ..c
                }
            }
            None => {
                let p = match params.take() {
                    Some(p) => p,
                    None => load_run(&layout.checkpoint(seed))?.0,
                };
                log::info!("cross-checking {id} ({})", other.as_str());
                let (other_records, _) = run_exhaustive_attack(&p, ds, other, &id)?;
                let sha = write_records(&path, &other_records)?;
                let c = CrossCheck {
                    mode: other,
                    checkpoint_sha256: meta.checkpoint_sha256.clone(),
                    identical: sha == records_sha256,
                    records_sha256: sha,
                };
                write_json(&meta_path, &c)?;
                ctx.time("cross_check", &name, Some(seed), t, false);
                c
            }
        };
        if !check.identical {
            log::error!("{id}: attack paths disagree");
        }
        cross_check = Some(check);
    }

    let report = AttackReport {
        mode,
        records: layout.relative(&rec_path),
        records_sha256,
        adversarial_count: summary.adversarial_count,
        candidates_total: summary.candidates_total,
        ratio: summary.ratio(),
        cross_check,
    };
    Ok((report, summary, records))
}
