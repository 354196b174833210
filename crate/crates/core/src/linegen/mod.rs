//! Centered line images generated from a (length, angle) manifold.
//!
//! A manifold point `(L, α)` is drawn as a closed band of width one pixel
//! around the segment of length `L` centered on the continuous image center
//! `c = ((D-1)/2, (D-1)/2)` with direction `(cos α, -sin α)` (rows grow
//! downward). A pixel is set when its center lies within half a pixel of the
//! segment's supporting line and within `L/2` of `c` along it. The rule is
//! invariant under `(r, c) -> (D-1-r, D-1-c)`, so every image is point
//! symmetric, and for even `D` two distinct images differ in at least two
//! pixels.

mod pack;

use std::collections::{BTreeMap, HashMap};

use crate::bits::BitGrid;
use crate::error::{Error, Result};

pub use pack::{encode_dataset, read_dataset, write_dataset, write_manifest_csv, DATASET_MAGIC};

/// Shortest line length in every configuration.
pub const LENGTH_MIN: u32 = 12;
/// Upper end of the positive class, inclusive.
pub const BOUNDARY_MDEG: u32 = 40_000;
pub const HALF_TURN_MDEG: u32 = 180_000;
/// Human-readable statement of the labeling rule, stored next to datasets.
pub const LABEL_RULE: &str = "y = 1 iff 0 <= alpha_deg <= 40 (both ends inclusive), else y = 0";
pub const RASTER_RULE: &str =
    "pixel set iff |perpendicular offset| <= 0.5 and |offset along line| <= L/2 from the image center";

const TIE_EPS: f64 = 1e-9;

/// A point on the generation manifold. Angles are held in integer
/// millidegrees so that dedup and labeling are exact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub struct ManifoldPoint {
    pub angle_mdeg: u32,
    pub length_px: u32,
}

impl ManifoldPoint {
    pub fn new(length_px: u32, angle_deg: f64) -> Result<Self> {
        Ok(ManifoldPoint {
            length_px,
            angle_mdeg: deg_to_mdeg(angle_deg)?,
        })
    }

    pub fn from_mdeg(length_px: u32, angle_mdeg: u32) -> Self {
        ManifoldPoint {
            angle_mdeg,
            length_px,
        }
    }

    pub fn angle_deg(&self) -> f64 {
        f64::from(self.angle_mdeg) / 1000.0
    }
}

/// Converts degrees to millidegrees, rejecting values outside `[0, 180)` or
/// finer than a millidegree.
pub fn deg_to_mdeg(angle_deg: f64) -> Result<u32> {
    if !angle_deg.is_finite() || !(0.0..180.0).contains(&angle_deg) {
        return Err(Error::InvalidPoint(format!(
            "angle {angle_deg} outside [0, 180)"
        )));
    }
    let md = (angle_deg * 1000.0).round();
    if (md / 1000.0 - angle_deg).abs() > 1e-9 {
        return Err(Error::InvalidPoint(format!(
            "angle {angle_deg} is not a whole number of millidegrees"
        )));
    }
    Ok(md as u32)
}

/// Binary class of an angle: 1 on `[0°, 40°]`, 0 elsewhere.
pub fn label_of_angle(angle_deg: f64) -> u8 {
    u8::from((0.0..=40.0).contains(&angle_deg))
}

pub fn label_of_mdeg(angle_mdeg: u32) -> u8 {
    u8::from(angle_mdeg <= BOUNDARY_MDEG)
}

/// `(cos α, sin α)`, exact on the axes.
pub fn unit_direction(angle_mdeg: u32) -> (f64, f64) {
    match angle_mdeg {
        0 => (1.0, 0.0),
        90_000 => (0.0, 1.0),
        _ => {
            let a = (f64::from(angle_mdeg) / 1000.0).to_radians();
            (a.cos(), a.sin())
        }
    }
}

/// Offsets of pixel `(row, col)` from the center, projected onto the line
/// direction and its normal: `(along, perpendicular)`.
#[inline]
pub fn line_offsets(dim: usize, row: usize, col: usize, cos: f64, sin: f64) -> (f64, f64) {
    let center = (dim as f64 - 1.0) / 2.0;
    let ox = col as f64 - center;
    let oy = row as f64 - center;
    (ox * cos - oy * sin, ox * sin + oy * cos)
}

/// Rasterizes a manifold point into a `dim × dim` grid.
pub fn rasterize_line(point: ManifoldPoint, dim: usize) -> Result<BitGrid> {
    if dim < 4 {
        return Err(Error::InvalidConfig(format!("dimension {dim} below 4")));
    }
    let l = point.length_px as usize;
    if l < 1 || l > dim - 2 {
        return Err(Error::InvalidPoint(format!(
            "length {l} outside [1, {}] for D={dim}",
            dim - 2
        )));
    }
    if point.angle_mdeg >= HALF_TURN_MDEG {
        return Err(Error::InvalidPoint(format!(
            "angle {} outside [0, 180)",
            point.angle_deg()
        )));
    }
    let (cos, sin) = unit_direction(point.angle_mdeg);
    let half = l as f64 / 2.0 + TIE_EPS;
    let mut grid = BitGrid::new(dim);
    for row in 0..dim {
        for col in 0..dim {
            let (along, perp) = line_offsets(dim, row, col, cos, sin);
            if along.abs() <= half && perp.abs() <= 0.5 + TIE_EPS {
                grid.set(row, col, true);
            }
        }
    }
    Ok(grid)
}

/// One unique image of a dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LineImage {
    pub id: u32,
    pub bits: BitGrid,
    /// Smallest angle, then smallest length, among the points drawing `bits`.
    pub canonical: ManifoldPoint,
    pub label: u8,
    pub popcount: u32,
}

impl LineImage {
    pub fn dim(&self) -> usize {
        self.bits.dim()
    }
}

/// The complete, deduplicated image set of one `(D, angle step)` configuration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub dim: usize,
    pub angle_step_mdeg: u32,
    pub length_min: u32,
    pub length_max: u32,
    pub images: Vec<LineImage>,
    /// Canonical angle -> ids of the images at that angle.
    pub angle_index: BTreeMap<u32, Vec<u32>>,
    /// Bit patterns drawn by points of both classes; excluded from `images`.
    pub conflict_count: u32,
    pub content_hash: String,
}

impl Dataset {
    /// Assembles a dataset from already deduplicated images, recomputing the
    /// angle index and content hash.
    pub fn from_parts(
        dim: usize,
        angle_step_mdeg: u32,
        images: Vec<LineImage>,
        conflict_count: u32,
    ) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut angle_index: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
        for img in &images {
            angle_index
                .entry(img.canonical.angle_mdeg)
                .or_default()
                .push(img.id);
        }
        let mut ds = Dataset {
            dim,
            angle_step_mdeg,
            length_min: LENGTH_MIN,
            length_max: (dim - 2) as u32,
            images,
            angle_index,
            conflict_count,
            content_hash: String::new(),
        };
        ds.content_hash = crate::fsutil::sha256_hex(&encode_dataset(&ds));
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn angle_step_deg(&self) -> f64 {
        f64::from(self.angle_step_mdeg) / 1000.0
    }

    pub fn image(&self, id: u32) -> Result<&LineImage> {
        // ids are dense and equal to positions
        self.images
            .get(id as usize)
            .filter(|img| img.id == id)
            .ok_or(Error::UnknownImage(id))
    }

    /// Number of images whose canonical angle is `angle_mdeg`.
    pub fn n_alpha(&self, angle_mdeg: u32) -> usize {
        self.angle_index.get(&angle_mdeg).map_or(0, Vec::len)
    }

    /// Lookup table from bit pattern to image id.
    pub fn pattern_index(&self) -> HashMap<&BitGrid, u32> {
        self.images.iter().map(|img| (&img.bits, img.id)).collect()
    }

    pub fn label_counts(&self) -> [usize; 2] {
        let mut counts = [0; 2];
        for img in &self.images {
            counts[img.label as usize] += 1;
        }
        counts
    }
}

/// Validates `(dim, step)` and returns the step in millidegrees.
pub fn validate_config(dim: usize, angle_step_deg: f64) -> Result<u32> {
    if dim < 16 || dim % 2 != 0 {
        return Err(Error::InvalidConfig(format!(
            "dimension {dim} must be even and at least 16"
        )));
    }
    if dim > u16::MAX as usize {
        return Err(Error::InvalidConfig(format!("dimension {dim} too large")));
    }
    if !(angle_step_deg > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "angle step {angle_step_deg} must be positive"
        )));
    }
    let step = deg_to_mdeg(angle_step_deg)
        .map_err(|_| Error::InvalidConfig(format!("angle step {angle_step_deg} not representable")))?;
    if step == 0 || HALF_TURN_MDEG % step != 0 {
        return Err(Error::InvalidConfig(format!(
            "angle step {angle_step_deg} does not divide 180"
        )));
    }
    Ok(step)
}

/// Every manifold point of a configuration, in (angle, length) order.
pub fn manifold_points(dim: usize, angle_step_mdeg: u32) -> impl Iterator<Item = ManifoldPoint> {
    let lmax = (dim - 2) as u32;
    (0..HALF_TURN_MDEG / angle_step_mdeg).flat_map(move |k| {
        (LENGTH_MIN..=lmax).map(move |l| ManifoldPoint::from_mdeg(l, k * angle_step_mdeg))
    })
}

/// Generates the complete set of unique images for `(dim, angle step)`.
pub fn generate_dataset(dim: usize, angle_step_deg: f64) -> Result<Dataset> {
    let step = validate_config(dim, angle_step_deg)?;

    struct Entry {
        canonical: ManifoldPoint,
        label: u8,
        conflicted: bool,
    }

    let mut order: Vec<BitGrid> = Vec::new();
    let mut seen: HashMap<BitGrid, Entry> = HashMap::new();
    // points arrive in (angle, length) order, so the first hit is canonical
    for point in manifold_points(dim, step) {
        let bits = rasterize_line(point, dim)?;
        let label = label_of_mdeg(point.angle_mdeg);
        match seen.get_mut(&bits) {
            Some(entry) => {
                if entry.label != label {
                    entry.conflicted = true;
                }
            }
            None => {
                order.push(bits.clone());
                seen.insert(
                    bits,
                    Entry {
                        canonical: point,
                        label,
                        conflicted: false,
                    },
                );
            }
        }
    }

    let mut conflicts = 0;
    let mut images = Vec::with_capacity(order.len());
    for bits in order {
        let entry = seen.remove(&bits).expect("pattern recorded");
        if entry.conflicted {
            conflicts += 1;
            continue;
        }
        let popcount = bits.count_ones();
        if popcount == 0 {
            continue;
        }
        images.push(LineImage {
            id: images.len() as u32,
            bits,
            canonical: entry.canonical,
            label: entry.label,
            popcount,
        });
    }
    Dataset::from_parts(dim, step, images, conflicts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels() {
        assert_eq!(label_of_angle(20.0), 1);
        assert_eq!(label_of_angle(0.0), 1);
        assert_eq!(label_of_angle(40.0), 1);
        assert_eq!(label_of_angle(40.5), 0);
        assert_eq!(label_of_angle(90.0), 0);
        assert_eq!(label_of_mdeg(40_000), 1);
        assert_eq!(label_of_mdeg(40_001), 0);
    }

    #[test]
    fn axis_aligned_lines() {
        // even D: a horizontal line straddles the two middle rows
        let g = rasterize_line(ManifoldPoint::new(14, 0.0).unwrap(), 16).unwrap();
        assert_eq!(g.count_ones(), 28);
        for (r, c) in g.ones() {
            assert!(r == 7 || r == 8);
            assert!((1..=14).contains(&c));
        }
        let g = rasterize_line(ManifoldPoint::new(12, 90.0).unwrap(), 16).unwrap();
        assert_eq!(g.count_ones(), 24);
        for (r, c) in g.ones() {
            assert!(c == 7 || c == 8);
            assert!((2..=13).contains(&r));
        }
    }

    #[test]
    fn rejects_bad_points() {
        assert!(rasterize_line(ManifoldPoint::from_mdeg(15, 0), 16).is_err());
        assert!(rasterize_line(ManifoldPoint::from_mdeg(12, 180_000), 16).is_err());
        assert!(ManifoldPoint::new(12, 180.0).is_err());
        assert!(ManifoldPoint::new(12, -1.0).is_err());
        assert!(ManifoldPoint::new(12, 0.0001).is_err());
    }

    #[test]
    fn config_validation() {
        assert_eq!(validate_config(16, 0.5).unwrap(), 500);
        assert!(validate_config(15, 1.0).is_err());
        assert!(validate_config(8, 1.0).is_err());
        assert!(validate_config(16, 0.7).is_err());
        assert!(validate_config(16, 0.0).is_err());
        assert!(validate_config(16, 181.0).is_err());
    }

    #[test]
    fn point_symmetry_small() {
        let ds = generate_dataset(16, 2.0).unwrap();
        for img in &ds.images {
            for (r, c) in img.bits.ones() {
                assert!(img.bits.get(15 - r, 15 - c), "asymmetric image {}", img.id);
            }
            assert_eq!(img.label, label_of_mdeg(img.canonical.angle_mdeg));
        }
    }
}
