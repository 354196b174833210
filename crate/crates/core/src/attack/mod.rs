//! Exhaustive one-pixel-flip search.
//!
//! Every dataset image is attacked by inverting each of its `D²` pixels in
//! turn. A candidate keeps the label of the image it was made from. Two
//! evaluation paths exist: `Full` runs the complete network on every
//! candidate, `IncrementalVerified` uses [`IncrementalNet`] and re-runs the
//! full network on anything it flags or finds close to a tie. In both
//! modes the decision and the recorded probabilities for a reported
//! candidate come from the same single-image forward pass, so the record
//! lists agree byte for byte.

mod incremental;
mod io;

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bits::BitGrid;
use crate::cnn::{forward_batch, forward_inputs, predict_class, Mode, ModelParams};
use crate::error::{Error, Result};
use crate::linegen::{Dataset, LineImage};
use crate::trainer::evaluate_accuracy;

pub use incremental::{FlipStats, IncrementalNet, SourceActivations};
pub use io::{
    read_records, read_summary, records_to_csv, write_records, write_summary, RECORDS_HEADER,
};

/// Candidates whose class probabilities are closer than this are always
/// decided by a full single-image forward pass.
pub const NEAR_TIE: f32 = 1e-3;

/// Environment variable overriding the attack worker count.
pub const WORKERS_ENV: &str = "LPX_WORKERS";

const FULL_BATCH: usize = 64;
/// Images whose source activations are computed in one forward pass.
const SOURCE_BATCH: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMode {
    Full,
    IncrementalVerified,
}

impl AttackMode {
    /// Default path for a given image size: the full network is only
    /// affordable on every candidate up to `D = 48`.
    pub fn default_for(dim: usize) -> Self {
        if dim >= 64 {
            AttackMode::IncrementalVerified
        } else {
            AttackMode::Full
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AttackMode::Full => "full",
            AttackMode::IncrementalVerified => "incremental_verified",
        }
    }
}

impl std::str::FromStr for AttackMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(AttackMode::Full),
            "incremental_verified" | "incremental" => Ok(AttackMode::IncrementalVerified),
            other => Err(Error::InvalidConfig(format!("unknown attack mode {other:?}"))),
        }
    }
}

/// One source image with one pixel inverted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttackCandidate {
    pub image_id: u32,
    pub row: u16,
    pub col: u16,
    pub flipped_to: bool,
    /// Id of the dataset image whose bit pattern equals this candidate.
    pub matches: Option<u32>,
}

impl AttackCandidate {
    pub fn matches_dataset_image(&self) -> bool {
        self.matches.is_some()
    }

    pub fn apply(&self, source: &BitGrid) -> BitGrid {
        let mut g = source.clone();
        g.flip(self.row as usize, self.col as usize);
        g
    }
}

/// Zobrist-style lookup of dataset bit patterns. Candidate hashes are
/// derived from the source hash in O(1); hits are confirmed bit for bit.
pub struct PatternLookup<'a> {
    dataset: &'a Dataset,
    keys: Vec<u64>,
    table: HashMap<u64, Vec<u32>>,
}

impl<'a> PatternLookup<'a> {
    pub fn new(dataset: &'a Dataset) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_f11b);
        let keys: Vec<u64> = (0..dataset.dim * dataset.dim).map(|_| rng.gen()).collect();
        let mut table: HashMap<u64, Vec<u32>> = HashMap::new();
        for img in &dataset.images {
            let h = hash_grid(&keys, &img.bits);
            table.entry(h).or_default().push(img.id);
        }
        PatternLookup { dataset, keys, table }
    }

    pub fn hash(&self, grid: &BitGrid) -> u64 {
        hash_grid(&self.keys, grid)
    }

    /// Dataset image equal to `source` with `(row, col)` inverted.
    pub fn find_flip(&self, source: &BitGrid, source_hash: u64, row: usize, col: usize) -> Option<u32> {
        let d = source.dim();
        let ids = self.table.get(&(source_hash ^ self.keys[row * d + col]))?;
        ids.iter().copied().find(|&id| {
            let other = &self.dataset.images[id as usize].bits;
            other.hamming(source) == 1 && other.get(row, col) != source.get(row, col)
        })
    }
}

fn hash_grid(keys: &[u64], grid: &BitGrid) -> u64 {
    let d = grid.dim();
    grid.ones().fold(0, |h, (r, c)| h ^ keys[r * d + c])
}

/// All `D²` single-pixel flips of `image`, row-major.
pub fn enumerate_flips<'a>(
    image: &'a LineImage,
    lookup: &'a PatternLookup<'_>,
) -> impl Iterator<Item = AttackCandidate> + 'a {
    let d = image.dim();
    let h = lookup.hash(&image.bits);
    (0..d * d).map(move |k| {
        let (row, col) = (k / d, k % d);
        AttackCandidate {
            image_id: image.id,
            row: row as u16,
            col: col as u16,
            flipped_to: !image.bits.get(row, col),
            matches: lookup.find_flip(&image.bits, h, row, col),
        }
    })
}

/// A confirmed adversarial example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRecord {
    pub model_id: String,
    pub image_id: u32,
    pub row: u16,
    pub col: u16,
    pub alpha_mdeg: u32,
    pub length: u32,
    pub source_label: u8,
    pub predicted_class: u8,
    pub probs: [f32; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AngleCount {
    pub alpha_deg: f64,
    pub n_alpha: usize,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSummary {
    pub model_id: String,
    pub dim: usize,
    pub angle_step_deg: f64,
    pub dataset_digest: String,
    pub mode: AttackMode,
    pub n_images: usize,
    pub candidates_total: u64,
    pub adversarial_count: u64,
    /// Candidates identical to some dataset image.
    pub matched_candidates: u64,
    /// Candidates that needed a single-image forward pass to decide.
    pub verified_candidates: u64,
    pub per_angle: Vec<AngleCount>,
    /// `D` rows of `D` counts.
    pub per_pixel: Vec<Vec<u64>>,
    /// Provenance filled in by whoever persists the summary.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_sha256: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub records_sha256: Option<String>,
}

impl AttackSummary {
    pub fn ratio(&self) -> f64 {
        self.adversarial_count as f64 / self.candidates_total as f64
    }
}

#[derive(Default)]
struct ImageOutcome {
    records: Vec<AttackRecord>,
    matched: u64,
    verified: u64,
}

/// Worker count: `LPX_WORKERS` if set and positive, else rayon's default.
pub fn worker_count() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(rayon::current_num_threads)
}

/// Runs the exhaustive attack with [`worker_count`] threads.
pub fn run_exhaustive_attack(
    params: &ModelParams<f32>,
    dataset: &Dataset,
    mode: AttackMode,
    model_id: &str,
) -> Result<(Vec<AttackRecord>, AttackSummary)> {
    run_exhaustive_attack_with(params, dataset, mode, model_id, worker_count())
}

pub fn run_exhaustive_attack_with(
    params: &ModelParams<f32>,
    dataset: &Dataset,
    mode: AttackMode,
    model_id: &str,
    workers: usize,
) -> Result<(Vec<AttackRecord>, AttackSummary)> {
    if params.dim != dataset.dim {
        return Err(Error::ShapeMismatch(format!(
            "model is {0}x{0}, dataset is {1}x{1}",
            params.dim, dataset.dim
        )));
    }
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let acc = evaluate_accuracy(params, dataset)?;
    if acc != 1.0 {
        return Err(Error::NotConverged(format!(
            "{model_id} has training accuracy {acc}; attacks need a perfectly fitting model"
        )));
    }
    let lookup = PatternLookup::new(dataset);
    let net = IncrementalNet::new(params)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    let outcomes: Vec<Vec<ImageOutcome>> = pool.install(|| {
        dataset
            .images
            .par_chunks(SOURCE_BATCH)
            .map(|chunk| {
                let sources = match mode {
                    AttackMode::IncrementalVerified => {
                        let grids: Vec<&BitGrid> = chunk.iter().map(|i| &i.bits).collect();
                        net.sources(&grids)?.into_iter().map(Some).collect()
                    }
                    AttackMode::Full => vec![None; chunk.len()],
                };
                chunk
                    .iter()
                    .zip(sources)
                    .map(|(img, src)| attack_image(&net, dataset, &lookup, img, src.as_ref(), model_id))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let d = dataset.dim;
    let mut records = Vec::new();
    let mut matched = 0;
    let mut verified = 0;
    for o in outcomes.into_iter().flatten() {
        records.extend(o.records);
        matched += o.matched;
        verified += o.verified;
    }
    records.sort_by_key(|r| (r.image_id, r.row, r.col));

    let mut per_angle: BTreeMap<u32, u64> = dataset.angle_index.keys().map(|&a| (a, 0)).collect();
    let mut per_pixel = vec![vec![0u64; d]; d];
    for r in &records {
        *per_angle.get_mut(&r.alpha_mdeg).expect("record angle from dataset") += 1;
        per_pixel[r.row as usize][r.col as usize] += 1;
    }
    let summary = AttackSummary {
        model_id: model_id.to_string(),
        dim: d,
        angle_step_deg: dataset.angle_step_deg(),
        dataset_digest: dataset.content_hash.clone(),
        mode,
        n_images: dataset.len(),
        candidates_total: (dataset.len() * d * d) as u64,
        adversarial_count: records.len() as u64,
        matched_candidates: matched,
        verified_candidates: verified,
        per_angle: per_angle
            .into_iter()
            .map(|(a, count)| AngleCount {
                alpha_deg: f64::from(a) / 1000.0,
                n_alpha: dataset.n_alpha(a),
                count,
            })
            .collect(),
        per_pixel,
        checkpoint_sha256: None,
        records_sha256: None,
    };
    Ok((records, summary))
}

/// Single-image eval forward pass; the reference for every decision that
/// ends up in a record.
pub fn canonical_probs(params: &ModelParams<f32>, image: &BitGrid) -> Result<[f32; 2]> {
    Ok(forward_batch(params, &[image], Mode::Eval, 0.0, None)?.probs_of(0))
}

fn attack_image(
    net: &IncrementalNet<'_>,
    dataset: &Dataset,
    lookup: &PatternLookup<'_>,
    img: &LineImage,
    source: Option<&SourceActivations>,
    model_id: &str,
) -> Result<ImageOutcome> {
    let params = net.params();
    let d = dataset.dim;
    let cands: Vec<AttackCandidate> = enumerate_flips(img, lookup).collect();
    let mut out = ImageOutcome::default();

    let fast: Vec<[f32; 2]> = match source {
        Some(src) => cands
            .iter()
            .map(|c| net.flip_probs(src, c.row as usize, c.col as usize))
            .collect::<Result<_>>()?,
        None => {
            let dd = d * d;
            let mut base = vec![0.0f32; dd];
            img.bits.fill_real(&mut base);
            let mut probs = Vec::with_capacity(dd);
            for chunk in cands.chunks(FULL_BATCH) {
                let mut input = Vec::with_capacity(chunk.len() * dd);
                for c in chunk {
                    let at = input.len() + c.row as usize * d + c.col as usize;
                    input.extend_from_slice(&base);
                    input[at] = 1.0 - input[at];
                }
                let cache = forward_inputs(params, input, chunk.len(), Mode::Eval, 0.0, None)?;
                probs.extend((0..chunk.len()).map(|b| cache.probs_of(b)));
            }
            probs
        }
    };

    for (c, &p) in cands.iter().zip(&fast) {
        let truth = match c.matches {
            Some(id) => {
                out.matched += 1;
                dataset.images[id as usize].label
            }
            None => img.label,
        };
        let flagged = predict_class(p) != truth;
        if !flagged && (p[0] - p[1]).abs() >= NEAR_TIE {
            continue;
        }
        out.verified += 1;
        let probs = canonical_probs(params, &c.apply(&img.bits))?;
        let predicted = predict_class(probs);
        if predicted != truth {
            out.records.push(AttackRecord {
                model_id: model_id.to_string(),
                image_id: img.id,
                row: c.row,
                col: c.col,
                alpha_mdeg: img.canonical.angle_mdeg,
                length: img.canonical.length_px,
                source_label: truth,
                predicted_class: predicted,
                probs,
            });
        }
    }
    Ok(out)
}
