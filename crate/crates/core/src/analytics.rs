//! Aggregation of attack records into per-angle profiles, spatial heatmaps
//! and the redundancy table. Everything here is a pure function of the
//! records, the dataset and the model list.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attack::{AttackRecord, AttackSummary};
use crate::error::{Error, Result};
use crate::fsutil::{atomic_write, fmt_mdeg, write_json};
use crate::linegen::{line_offsets, rasterize_line, unit_direction, Dataset, ManifoldPoint, BOUNDARY_MDEG, HALF_TURN_MDEG};

/// Definition of the redundancy measure, stored with every redundancy table.
pub const RHO_DEFINITION: &str = "rho = D^2 / log2(N): image bits over bits needed to index a manifold point";
pub const HEATMAP_NORMALIZATION: &str = "per-pixel record count divided by N for each model, then averaged over models";

/// Mean over models of `ADV_cnt / (N·D²)`.
pub fn overall_ratio(summaries: &[AttackSummary]) -> Result<f64> {
    if summaries.is_empty() {
        return Err(Error::Analysis("overall ratio of zero models".into()));
    }
    Ok(summaries.iter().map(AttackSummary::ratio).sum::<f64>() / summaries.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AngleRow {
    pub alpha_mdeg: u32,
    pub n_alpha: usize,
    pub counts: Vec<u64>,
    pub adv_count_mean: f64,
    pub ratio_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AngleProfile {
    pub dim: usize,
    pub models: usize,
    pub rows: Vec<AngleRow>,
}

fn check_record(dataset: &Dataset, r: &AttackRecord) -> Result<()> {
    let img = dataset.images.get(r.image_id as usize).ok_or(Error::UnknownImage(r.image_id))?;
    let d = dataset.dim;
    if img.canonical.angle_mdeg != r.alpha_mdeg || r.row as usize >= d || r.col as usize >= d {
        return Err(Error::Analysis(format!(
            "record for image {} does not match the dataset",
            r.image_id
        )));
    }
    Ok(())
}

/// Adversarial counts grouped by the source image's canonical angle, one
/// row per dataset angle including those without any record.
pub fn angle_profile(dataset: &Dataset, models: &[&[AttackRecord]]) -> Result<AngleProfile> {
    let m = models.len();
    let mut counts: BTreeMap<u32, Vec<u64>> = dataset.angle_index.keys().map(|&a| (a, vec![0; m])).collect();
    for (k, recs) in models.iter().enumerate() {
        for r in recs.iter() {
            check_record(dataset, r)?;
            counts.get_mut(&r.alpha_mdeg).expect("angle from dataset")[k] += 1;
        }
    }
    let dd = (dataset.dim * dataset.dim) as f64;
    let rows = counts
        .into_iter()
        .map(|(a, counts)| {
            let n_alpha = dataset.n_alpha(a);
            let denom = n_alpha as f64 * dd;
            let (mean, ratio) = if m == 0 {
                (0.0, 0.0)
            } else {
                let mean = counts.iter().sum::<u64>() as f64 / m as f64;
                let ratio = counts.iter().map(|&c| c as f64 / denom).sum::<f64>() / m as f64;
                (mean, ratio)
            };
            AngleRow {
                alpha_mdeg: a,
                n_alpha,
                counts,
                adv_count_mean: mean,
                ratio_mean: ratio,
            }
        })
        .collect();
    Ok(AngleProfile { dim: dataset.dim, models: m, rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapGrid {
    pub dim: usize,
    pub models: usize,
    pub n_images: usize,
    /// Row-major record counts summed over models.
    pub counts: Vec<u64>,
    /// Row-major `count / N` per model, averaged over models.
    pub values: Vec<f64>,
}

impl HeatmapGrid {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

pub fn spatial_heatmap(dataset: &Dataset, models: &[&[AttackRecord]]) -> Result<HeatmapGrid> {
    let d = dataset.dim;
    let n = dataset.len();
    let mut counts = vec![0u64; d * d];
    let mut values = vec![0.0f64; d * d];
    for recs in models {
        let mut own = vec![0u64; d * d];
        for r in recs.iter() {
            check_record(dataset, r)?;
            own[r.row as usize * d + r.col as usize] += 1;
        }
        for ((c, v), o) in counts.iter_mut().zip(values.iter_mut()).zip(own) {
            *c += o;
            *v += o as f64 / n as f64;
        }
    }
    if !models.is_empty() {
        for v in &mut values {
            *v /= models.len() as f64;
        }
    }
    Ok(HeatmapGrid {
        dim: d,
        models: models.len(),
        n_images: n,
        counts,
        values,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Marker {
    pub alpha_mdeg: u32,
    pub length: u32,
    pub row: usize,
    pub col: usize,
}

/// The two end pixels of the longest lines at 0° and at the class
/// boundary. On thick lines the end with the smallest normal offset wins,
/// then the first in row-major order.
pub fn boundary_markers(dataset: &Dataset) -> Result<Vec<Marker>> {
    let d = dataset.dim;
    let l = dataset.length_max;
    let mut out = Vec::with_capacity(4);
    for a in [0, BOUNDARY_MDEG] {
        let grid = rasterize_line(ManifoldPoint::from_mdeg(l, a), d)?;
        let (cos, sin) = unit_direction(a);
        let px: Vec<(f64, f64, usize, usize)> = grid
            .ones()
            .map(|(r, c)| {
                let (along, perp) = line_offsets(d, r, c, cos, sin);
                (along, perp.abs(), r, c)
            })
            .collect();
        let pick = |sign: f64| {
            px.iter()
                .copied()
                .min_by(|x, y| {
                    (sign * x.0)
                        .total_cmp(&(sign * y.0))
                        .then(x.1.total_cmp(&y.1))
                        .then((x.2, x.3).cmp(&(y.2, y.3)))
                })
                .expect("non-empty line")
        };
        for sign in [1.0, -1.0] {
            let (_, _, row, col) = pick(sign);
            out.push(Marker { alpha_mdeg: a, length: l, row, col });
        }
    }
    Ok(out)
}

/// Angular distance to the nearer class boundary (0° ≡ 180°, or 40°).
pub fn boundary_distance_deg(alpha_mdeg: u32) -> f64 {
    let to_zero = alpha_mdeg.min(HALF_TURN_MDEG - alpha_mdeg);
    let to_forty = alpha_mdeg.abs_diff(BOUNDARY_MDEG);
    f64::from(to_zero.min(to_forty)) / 1000.0
}

/// Fraction of records whose source angle lies within `within_deg` of a
/// class boundary; `None` without records.
pub fn boundary_share(records: &[&AttackRecord], within_deg: f64) -> Option<f64> {
    if records.is_empty() {
        return None;
    }
    let near = records.iter().filter(|r| boundary_distance_deg(r.alpha_mdeg) <= within_deg).count();
    Some(near as f64 / records.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RedundancyRow {
    pub dim: usize,
    pub angle_step_deg: f64,
    pub n_images: usize,
    pub rho: f64,
    pub adv_ratio_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RedundancySummary {
    pub rho_definition: String,
    /// Sorted by `rho`, ties by `(dim, step)`.
    pub rows: Vec<RedundancyRow>,
    pub spearman: f64,
}

pub fn redundancy(dim: usize, n_images: usize) -> Result<f64> {
    if n_images <= 1 {
        return Err(Error::Analysis(format!("redundancy undefined for N = {n_images}")));
    }
    Ok((dim * dim) as f64 / (n_images as f64).log2())
}

/// Input: `(dim, step, N, mean adversarial ratio)` per configuration.
pub fn redundancy_summary(configs: &[(usize, f64, usize, f64)]) -> Result<RedundancySummary> {
    if configs.len() < 2 {
        return Err(Error::Analysis("redundancy analysis needs at least two configurations".into()));
    }
    let mut rows = configs
        .iter()
        .map(|&(dim, step, n, ratio)| {
            Ok(RedundancyRow {
                dim,
                angle_step_deg: step,
                n_images: n,
                rho: redundancy(dim, n)?,
                adv_ratio_mean: ratio,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by(|a, b| {
        a.rho
            .total_cmp(&b.rho)
            .then(a.dim.cmp(&b.dim))
            .then(a.angle_step_deg.total_cmp(&b.angle_step_deg))
    });
    let xs: Vec<f64> = rows.iter().map(|r| r.rho).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.adv_ratio_mean).collect();
    Ok(RedundancySummary {
        rho_definition: RHO_DEFINITION.to_owned(),
        spearman: spearman(&xs, &ys),
        rows,
    })
}

/// Ranks starting at 1, tied values sharing their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman correlation as the Pearson correlation of average ranks.
/// A constant input has no defined correlation and yields 0.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let (rx, ry) = (average_ranks(xs), average_ranks(ys));
    let mean = (n as f64 + 1.0) / 2.0;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mean) * (b - mean);
        sxx += (a - mean) * (a - mean);
        syy += (b - mean) * (b - mean);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelLine {
    pub model_id: String,
    pub adversarial_count: u64,
    pub candidates_total: u64,
    pub ratio: f64,
}

/// Contents of a configuration's `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigAnalysis {
    pub dim: usize,
    pub angle_step_deg: f64,
    pub n_images: usize,
    pub dataset_digest: String,
    pub models: Vec<ModelLine>,
    pub overall_ratio: f64,
    /// Share of records from images within 6° of a class boundary.
    pub boundary_share_6deg: Option<f64>,
    pub markers: Vec<Marker>,
    pub heatmap_normalization: String,
}

pub const BOUNDARY_WINDOW_DEG: f64 = 6.0;

/// Runs every per-configuration analysis. `models` pairs each summary
/// with its record list.
pub fn analyze_config(dataset: &Dataset, models: &[(AttackSummary, Vec<AttackRecord>)]) -> Result<(ConfigAnalysis, AngleProfile, HeatmapGrid)> {
    for (s, recs) in models {
        if s.dataset_digest != dataset.content_hash || s.adversarial_count != recs.len() as u64 {
            return Err(Error::Analysis(format!("summary of {} does not match its records or dataset", s.model_id)));
        }
    }
    let lists: Vec<&[AttackRecord]> = models.iter().map(|(_, r)| r.as_slice()).collect();
    let summaries: Vec<AttackSummary> = models.iter().map(|(s, _)| s.clone()).collect();
    let profile = angle_profile(dataset, &lists)?;
    let heatmap = spatial_heatmap(dataset, &lists)?;
    let all: Vec<&AttackRecord> = lists.iter().flat_map(|l| l.iter()).collect();
    let analysis = ConfigAnalysis {
        dim: dataset.dim,
        angle_step_deg: dataset.angle_step_deg(),
        n_images: dataset.len(),
        dataset_digest: dataset.content_hash.clone(),
        models: summaries
            .iter()
            .map(|s| ModelLine {
                model_id: s.model_id.clone(),
                adversarial_count: s.adversarial_count,
                candidates_total: s.candidates_total,
                ratio: s.ratio(),
            })
            .collect(),
        overall_ratio: overall_ratio(&summaries)?,
        boundary_share_6deg: boundary_share(&all, BOUNDARY_WINDOW_DEG),
        markers: boundary_markers(dataset)?,
        heatmap_normalization: HEATMAP_NORMALIZATION.to_owned(),
    };
    Ok((analysis, profile, heatmap))
}

pub fn angle_profile_csv(p: &AngleProfile) -> String {
    let mut s = String::from("alpha_deg,n_alpha,adv_count_mean,ratio_mean\n");
    for r in &p.rows {
        let _ = writeln!(s, "{},{},{},{}", fmt_mdeg(r.alpha_mdeg), r.n_alpha, r.adv_count_mean, r.ratio_mean);
    }
    s
}

pub fn heatmap_csv(h: &HeatmapGrid) -> String {
    let mut s = String::new();
    for row in h.values.chunks(h.dim) {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        s.push_str(&line.join(","));
        s.push('\n');
    }
    s
}

/// Plain PGM, scaled so the largest value maps to 65535.
pub fn heatmap_pgm(h: &HeatmapGrid) -> String {
    let max = h.values.iter().copied().fold(0.0f64, f64::max);
    let mut s = format!("P2\n{} {}\n65535\n", h.dim, h.dim);
    for row in h.values.chunks(h.dim) {
        let line: Vec<String> = row
            .iter()
            .map(|&v| if max > 0.0 { ((v / max) * 65535.0).round() as u32 } else { 0 }.to_string())
            .collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    s
}

pub fn markers_csv(markers: &[Marker]) -> String {
    let mut s = String::from("alpha_deg,length,row,col\n");
    for m in markers {
        let _ = writeln!(s, "{},{},{},{}", fmt_mdeg(m.alpha_mdeg), m.length, m.row, m.col);
    }
    s
}

pub fn redundancy_csv(r: &RedundancySummary) -> String {
    let mut s = String::from("dim,step,n_images,rho,adv_ratio_mean\n");
    for row in &r.rows {
        let _ = writeln!(s, "{},{},{},{},{}", row.dim, row.angle_step_deg, row.n_images, row.rho, row.adv_ratio_mean);
    }
    s
}

/// Writes the per-configuration analysis files into `dir`.
pub fn write_config_analysis(dir: &Path, analysis: &ConfigAnalysis, profile: &AngleProfile, heatmap: &HeatmapGrid) -> Result<()> {
    atomic_write(&dir.join("angle_profile.csv"), angle_profile_csv(profile).as_bytes())?;
    atomic_write(&dir.join("heatmap.csv"), heatmap_csv(heatmap).as_bytes())?;
    atomic_write(&dir.join("heatmap.pgm"), heatmap_pgm(heatmap).as_bytes())?;
    atomic_write(&dir.join("markers.csv"), markers_csv(&analysis.markers).as_bytes())?;
    write_json(&dir.join("summary.json"), analysis)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn average_ranks_share_ties() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn spearman_extremes() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert!((spearman(&x, &[10.0, 20.0, 30.0, 40.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&x, &[4.0, 3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        assert_eq!(spearman(&x, &[0.5; 4]), 0.0);
    }

    #[test]
    fn rho_reference_values() {
        assert!((redundancy(16, 170).unwrap() - 34.55).abs() < 0.01);
        assert!((redundancy(80, 10998).unwrap() - 476.7).abs() < 0.1);
        assert!(redundancy(16, 1).is_err());
    }

    #[test]
    fn boundary_distance_wraps() {
        assert_eq!(boundary_distance_deg(0), 0.0);
        assert_eq!(boundary_distance_deg(178_000), 2.0);
        assert_eq!(boundary_distance_deg(46_000), 6.0);
        assert_eq!(boundary_distance_deg(90_000), 50.0);
        assert_eq!(boundary_distance_deg(20_000), 20.0);
    }
}
