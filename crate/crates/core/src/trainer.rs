//! Full-dataset training to perfect accuracy, and the multi-seed protocol.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bits::BitGrid;
use crate::cnn::{
    adam_step, forward_batch, init_params, loss_and_gradients, predict_class, read_checkpoint,
    write_checkpoint, AdamConfig, Mode, ModelParams, OptimizerState,
};
use crate::error::{Error, Result};
use crate::fsutil::{read_json, sha256_hex, write_json};
use crate::layout::ConfigLayout;
use crate::linegen::{self, Dataset};

/// Consecutive perfect epoch-end evaluations required before stopping.
pub const CONFIRM_EPOCHS: usize = 3;
const EVAL_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub dropout_p: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            dropout_p: 0.25,
            batch_size: 32,
            max_epochs: 2000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::InvalidConfig("dropout must lie in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidConfig("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.adam_epsilon > 0.0) {
            return Err(Error::InvalidConfig("Adam epsilon must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be at least 1".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.adam_epsilon,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    /// Mean training loss over the epoch's mini-batches (dropout active).
    pub loss: f64,
    /// Eval-mode accuracy on the full dataset after the epoch.
    pub accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub dataset_digest: String,
    pub config: TrainConfig,
    pub history: Vec<EpochStats>,
    pub params: ModelParams<f32>,
    pub converged: bool,
}

impl TrainRun {
    pub fn final_accuracy(&self) -> f64 {
        self.history.last().map_or(0.0, |e| e.accuracy)
    }
}

/// Trains a fresh model on every image of `dataset`. Deterministic in
/// `(dataset, config)`: weights come from stream 0 of the seeded ChaCha8
/// generator, shuffling from stream 1 and dropout masks from stream 2.
pub fn train_model(dataset: &Dataset, config: &TrainConfig) -> Result<TrainRun> {
    train_model_with(dataset, config, |_, _| {})
}

/// As [`train_model`], calling `progress(epoch, stats)` after every epoch.
pub fn train_model_with(
    dataset: &Dataset,
    config: &TrainConfig,
    mut progress: impl FnMut(usize, &EpochStats),
) -> Result<TrainRun> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut params = init_params(dataset.dim, config.seed)?;
    let mut state = OptimizerState::<f32>::new(dataset.dim)?;
    let adam = config.adam();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    shuffle_rng.set_stream(1);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed);
    dropout_rng.set_stream(2);

    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut history = Vec::new();
    let mut perfect_streak = 0;
    let mut converged = false;
    for epoch in 0..config.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let images: Vec<&BitGrid> = chunk.iter().map(|&i| &dataset.images[i].bits).collect();
            let labels: Vec<u8> = chunk.iter().map(|&i| dataset.images[i].label).collect();
            let (loss, grads) =
                loss_and_gradients(&params, &images, &labels, config.dropout_p, &mut dropout_rng)?;
            loss_sum += f64::from(loss) * chunk.len() as f64;
            adam_step(&mut params, &grads, &mut state, &adam)?;
        }
        let stats = EpochStats {
            loss: loss_sum / dataset.len() as f64,
            accuracy: evaluate_accuracy(&params, dataset)?,
        };
        history.push(stats);
        progress(epoch, &stats);
        if stats.accuracy == 1.0 {
            perfect_streak += 1;
            if perfect_streak >= CONFIRM_EPOCHS {
                converged = true;
                break;
            }
        } else {
            perfect_streak = 0;
        }
    }
    Ok(TrainRun {
        dataset_digest: dataset.content_hash.clone(),
        config: config.clone(),
        history,
        params,
        converged,
    })
}

/// Eval-mode predictions for every image, in dataset order.
pub fn predict_all(params: &ModelParams<f32>, dataset: &Dataset) -> Result<Vec<u8>> {
    if params.dim != dataset.dim {
        return Err(Error::ShapeMismatch(format!(
            "model expects {0}x{0}, dataset is {1}x{1}",
            params.dim, dataset.dim
        )));
    }
    let mut out = Vec::with_capacity(dataset.len());
    for chunk in dataset.images.chunks(EVAL_CHUNK) {
        let images: Vec<&BitGrid> = chunk.iter().map(|img| &img.bits).collect();
        let cache = forward_batch(params, &images, Mode::Eval, 0.0, None)?;
        out.extend((0..chunk.len()).map(|b| predict_class(cache.probs_of(b))));
    }
    Ok(out)
}

/// Fraction of images whose eval-mode prediction equals the stored label.
pub fn evaluate_accuracy(params: &ModelParams<f32>, dataset: &Dataset) -> Result<f64> {
    let preds = predict_all(params, dataset)?;
    let correct = preds
        .iter()
        .zip(&dataset.images)
        .filter(|(&p, img)| p == img.label)
        .count();
    Ok(correct as f64 / dataset.len() as f64)
}

/// JSON sidecar stored next to every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub dim: usize,
    pub angle_step_deg: f64,
    pub config: TrainConfig,
    pub epochs: usize,
    pub final_accuracy: f64,
    pub converged: bool,
    pub dataset_digest: String,
    pub checkpoint_sha256: String,
    pub history: Vec<EpochStats>,
}

/// Writes `run` as a checkpoint plus sidecar and returns the sidecar.
pub fn save_run(run: &TrainRun, angle_step_deg: f64, checkpoint: &Path) -> Result<CheckpointMeta> {
    let sha = write_checkpoint(&run.params, checkpoint)?;
    let meta = CheckpointMeta {
        dim: run.params.dim,
        angle_step_deg,
        config: run.config.clone(),
        epochs: run.history.len(),
        final_accuracy: run.final_accuracy(),
        converged: run.converged,
        dataset_digest: run.dataset_digest.clone(),
        checkpoint_sha256: sha,
        history: run.history.clone(),
    };
    write_json(&sidecar_path(checkpoint), &meta)?;
    Ok(meta)
}

pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("json")
}

/// Returns the sidecar of an existing checkpoint if it matches the dataset
/// and configuration and the checkpoint bytes are intact.
pub fn existing_run(checkpoint: &Path, dataset_digest: &str, config: &TrainConfig) -> Option<CheckpointMeta> {
    let meta: CheckpointMeta = read_json(&sidecar_path(checkpoint)).ok()?;
    if meta.dataset_digest != dataset_digest || &meta.config != config {
        return None;
    }
    let bytes = std::fs::read(checkpoint).ok()?;
    (sha256_hex(&bytes) == meta.checkpoint_sha256).then_some(meta)
}

/// Loads a checkpoint and its sidecar.
pub fn load_run(checkpoint: &Path) -> Result<(ModelParams<f32>, CheckpointMeta)> {
    let meta: CheckpointMeta = read_json(&sidecar_path(checkpoint))?;
    let params = read_checkpoint(checkpoint)?;
    Ok((params, meta))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub dim: usize,
    pub step: f64,
    pub seed: u64,
    pub dataset_digest: String,
    pub checkpoint_path: String,
    pub converged: bool,
    pub final_accuracy: f64,
    pub epochs: usize,
    /// False when the run was reused from an earlier invocation. Not
    /// persisted, so a resumed protocol rewrites an identical manifest.
    #[serde(skip)]
    pub trained_now: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestSummary {
    pub runs: usize,
    pub converged: usize,
    pub not_converged: Vec<String>,
    #[serde(skip)]
    pub trained_now: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolManifest {
    pub runs: Vec<RunEntry>,
    pub summary: ManifestSummary,
}

impl ProtocolManifest {
    pub fn all_converged(&self) -> bool {
        self.summary.converged == self.summary.runs
    }
}

/// Loads the dataset of a configuration from `layout`, generating and
/// writing it (pack, CSV, JSON metadata) when missing or unreadable.
pub fn load_or_generate(layout: &ConfigLayout) -> Result<Dataset> {
    if let Ok(ds) = linegen::read_dataset(&layout.dataset()) {
        if ds.dim == layout.dim && ds.angle_step_mdeg == layout.step_mdeg {
            return Ok(ds);
        }
    }
    let ds = linegen::generate_dataset(layout.dim, layout.step_deg())?;
    linegen::write_manifest_csv(&ds, &layout.dataset_csv())?;
    write_json(&layout.dataset_meta(), &crate::layout::DatasetMeta::of(&ds))?;
    linegen::write_dataset(&ds, &layout.dataset())?;
    Ok(ds)
}

/// Trains (or reuses) `models_per_config` seeds `base_seed + k` for every
/// `(dim, step)` under `root`, and writes `root/manifest.json` atomically.
pub fn run_protocol(
    root: &Path,
    dims: &[usize],
    steps: &[f64],
    models_per_config: usize,
    base_seed: u64,
    template: &TrainConfig,
    mut progress: impl FnMut(&str),
) -> Result<ProtocolManifest> {
    if dims.is_empty() || steps.is_empty() || models_per_config == 0 {
        return Err(Error::InvalidConfig("empty protocol grid".into()));
    }
    template.validate()?;
    let mut runs = Vec::new();
    for &dim in dims {
        for &step in steps {
            let layout = ConfigLayout::new(root, dim, step)?;
            let ds = load_or_generate(&layout)?;
            for k in 0..models_per_config {
                let seed = base_seed + k as u64;
                let config = TrainConfig {
                    seed,
                    ..template.clone()
                };
                let ckpt = layout.checkpoint(seed);
                let (meta, trained_now) = match existing_run(&ckpt, &ds.content_hash, &config) {
                    Some(meta) => (meta, false),
                    None => {
                        progress(&format!("training {} seed {seed}", layout.name()));
                        let tag = layout.name();
                        let run = train_model_with(&ds, &config, |epoch, s| {
                            log::debug!("{tag} seed {seed} epoch {epoch}: loss {:.6} acc {:.4}", s.loss, s.accuracy);
                        })?;
                        (save_run(&run, step, &ckpt)?, true)
                    }
                };
                runs.push(RunEntry {
                    dim,
                    step,
                    seed,
                    dataset_digest: ds.content_hash.clone(),
                    checkpoint_path: layout.relative(&ckpt),
                    converged: meta.converged,
                    final_accuracy: meta.final_accuracy,
                    epochs: meta.epochs,
                    trained_now,
                });
            }
        }
    }
    write_manifest(root, runs)
}

/// Writes `root/manifest.json` atomically from `runs`, keeping entries of
/// other grid points recorded by earlier invocations.
pub fn write_manifest(root: &Path, mut runs: Vec<RunEntry>) -> Result<ProtocolManifest> {
    let manifest_path = root.join("manifest.json");
    if let Ok(previous) = read_json::<ProtocolManifest>(&manifest_path) {
        for old in previous.runs {
            let replaced = runs
                .iter()
                .any(|r| r.dim == old.dim && r.step == old.step && r.seed == old.seed);
            if !replaced {
                runs.push(RunEntry {
                    trained_now: false,
                    ..old
                });
            }
        }
    }
    runs.sort_by(|a, b| {
        (a.dim, a.step, a.seed)
            .partial_cmp(&(b.dim, b.step, b.seed))
            .expect("finite steps")
    });
    let summary = ManifestSummary {
        runs: runs.len(),
        converged: runs.iter().filter(|r| r.converged).count(),
        not_converged: runs
            .iter()
            .filter(|r| !r.converged)
            .map(|r| r.checkpoint_path.clone())
            .collect(),
        trained_now: runs.iter().filter(|r| r.trained_now).count(),
    };
    let manifest = ProtocolManifest { runs, summary };
    write_json(&manifest_path, &manifest)?;
    Ok(manifest)
}
