//! Where each artifact of an experiment lives under the output root.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::linegen::{self, Dataset};

#[derive(Debug, Clone)]
pub struct ConfigLayout {
    pub root: PathBuf,
    pub dim: usize,
    pub step_mdeg: u32,
    pub dir: PathBuf,
}

impl ConfigLayout {
    pub fn new(root: &Path, dim: usize, step_deg: f64) -> Result<Self> {
        let step_mdeg = linegen::validate_config(dim, step_deg)?;
        let name = config_name(dim, step_mdeg);
        Ok(ConfigLayout {
            root: root.to_path_buf(),
            dim,
            step_mdeg,
            dir: root.join(name),
        })
    }

    pub fn step_deg(&self) -> f64 {
        f64::from(self.step_mdeg) / 1000.0
    }

    pub fn name(&self) -> String {
        config_name(self.dim, self.step_mdeg)
    }

    pub fn dataset(&self) -> PathBuf {
        self.dir.join("dataset.lpx")
    }

    pub fn dataset_csv(&self) -> PathBuf {
        self.dir.join("dataset.csv")
    }

    pub fn dataset_meta(&self) -> PathBuf {
        self.dir.join("dataset.json")
    }

    pub fn checkpoint(&self, seed: u64) -> PathBuf {
        self.dir.join("models").join(format!("seed{seed}.lpxm"))
    }

    pub fn records(&self, seed: u64) -> PathBuf {
        self.dir.join("attacks").join(format!("seed{seed}.csv"))
    }

    pub fn attack_summary(&self, seed: u64) -> PathBuf {
        self.dir.join("attacks").join(format!("seed{seed}.summary.json"))
    }

    pub fn analysis_dir(&self) -> PathBuf {
        self.dir.join("analysis")
    }

    /// `path` relative to the experiment root, with `/` separators.
    pub fn relative(&self, path: &Path) -> String {
        path.strip_prefix(&self.root)
            .unwrap_or(path)
            .components()
            .map(|c| c.as_os_str().to_string_lossy())
            .collect::<Vec<_>>()
            .join("/")
    }
}

/// Directory name of a configuration, e.g. `d16_step2.0` or `d32_step0.5`.
pub fn config_name(dim: usize, step_mdeg: u32) -> String {
    let step = if step_mdeg % 1000 == 0 {
        format!("{}.0", step_mdeg / 1000)
    } else {
        crate::fsutil::fmt_mdeg(step_mdeg)
    };
    format!("d{dim}_step{step}")
}

/// Human-readable metadata written next to each dataset pack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub dim: usize,
    pub angle_step_deg: f64,
    pub images: usize,
    pub conflicts: u32,
    pub length_min: u32,
    pub length_max: u32,
    pub label_counts: [usize; 2],
    pub content_hash: String,
    pub label_rule: String,
    pub raster_rule: String,
}

impl DatasetMeta {
    pub fn of(ds: &Dataset) -> Self {
        DatasetMeta {
            dim: ds.dim,
            angle_step_deg: ds.angle_step_deg(),
            images: ds.len(),
            conflicts: ds.conflict_count,
            length_min: ds.length_min,
            length_max: ds.length_max,
            label_counts: ds.label_counts(),
            content_hash: ds.content_hash.clone(),
            label_rule: linegen::LABEL_RULE.to_owned(),
            raster_rule: linegen::RASTER_RULE.to_owned(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names() {
        assert_eq!(config_name(16, 2000), "d16_step2.0");
        assert_eq!(config_name(32, 500), "d32_step0.5");
        let l = ConfigLayout::new(Path::new("/x"), 16, 1.0).unwrap();
        assert_eq!(l.relative(&l.checkpoint(3)), "d16_step1.0/models/seed3.lpxm");
    }
}
