//! On-disk layout of datasets and result directories.
//!
//! ```text
//! dataset/
//!   manifest.txt            flat key = value
//!   truth/w_true.mat
//!   center_0/x.mat  y.mat  labels.txt
//!   ...
//! ```
//!
//! `.mat` files hold one matrix: `rows: u64`, `cols: u64`, then row-major
//! little-endian `f64`.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use nalgebra::DMatrix;
use sha2::{Digest, Sha256};

use fedcov::config::FlatConfig;
use fedcov::federation::{CenterSite, CovariateSpec, CovariateTable, GroundTruth};
use fedcov::stats::CenterData;
use fedcov::wire::{decode_matrix, encode_matrix};
use fedcov::CenterId;

pub fn write_matrix(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    write_atomic(path, &encode_matrix(m))
}

pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    decode_matrix(&bytes).with_context(|| format!("decoding {}", path.display()))
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

pub fn read_flat(path: &Path) -> Result<FlatConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(FlatConfig::parse(&text)?)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// First comment line of every CSV the tool writes.
pub fn provenance(config_hash: &str, seed: Option<u64>) -> String {
    match seed {
        Some(s) => format!("# fedcov config_hash={config_hash} seed={s}\n"),
        None => format!("# fedcov config_hash={config_hash} seed=none\n"),
    }
}

pub fn center_dir(root: &Path, id: CenterId) -> PathBuf {
    root.join(format!("center_{id}"))
}

/// Dataset manifest plus where it lives.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: FlatConfig,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let manifest = read_flat(&root.join("manifest.txt"))?;
        if manifest.get("kind") != Some("dataset") {
            bail!("{} is not a dataset directory", root.display());
        }
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn n_centers(&self) -> Result<usize> {
        self.manifest
            .parsed::<usize>("centers")?
            .context("dataset manifest lacks 'centers'")
    }

    pub fn seed(&self) -> Option<u64> {
        self.manifest.parsed("seed").ok().flatten()
    }

    pub fn ids(&self) -> Result<Vec<CenterId>> {
        Ok((0..self.n_centers()? as u32).map(CenterId).collect())
    }

    pub fn covariate_names(&self) -> Vec<String> {
        self.manifest
            .get("covariate_names")
            .map(|s| s.split(',').map(|n| n.trim().to_string()).collect())
            .unwrap_or_default()
    }

    /// Loads a single center, deriving its design matrix locally.
    pub fn load_center(&self, id: CenterId, spec: &CovariateSpec) -> Result<CenterSite> {
        let dir = center_dir(&self.root, id);
        let x = read_matrix(&dir.join("x.mat"))?;
        let raw = read_matrix(&dir.join("y.mat"))?;
        let mut names = self.covariate_names();
        if names.len() != raw.ncols() {
            names = (0..raw.ncols()).map(|j| format!("y{j}")).collect();
        }
        let y = CovariateTable::new(names, raw)?.derive(spec)?;
        let mut site = CenterSite::new(id, CenterData::new(x, y)?);
        let labels_path = dir.join("labels.txt");
        if labels_path.is_file() {
            let labels = fs::read_to_string(&labels_path)?.lines().map(str::to_string).collect();
            site = site.with_labels(labels)?;
        }
        Ok(site)
    }

    pub fn load_all(&self, spec: &CovariateSpec) -> Result<Vec<CenterSite>> {
        self.ids()?.into_iter().map(|id| self.load_center(id, spec)).collect()
    }

    /// Ground truth, only meaningful when covariates are used as stored.
    pub fn truth(&self, spec: &CovariateSpec) -> Result<Option<GroundTruth>> {
        let path = self.root.join("truth").join("w_true.mat");
        if !spec.terms.is_empty() || !path.is_file() {
            return Ok(None);
        }
        let intercept = self.manifest.parsed::<bool>("intercept")?.unwrap_or(false);
        Ok(Some(GroundTruth {
            w: read_matrix(&path)?,
            intercept_column: intercept.then_some(0),
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a/m.mat");
        let m = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, f64::MIN_POSITIVE]);
        write_matrix(&p, &m).unwrap();
        assert_eq!(read_matrix(&p).unwrap(), m);
        assert_eq!(fs::metadata(&p).unwrap().len(), 16 + 48);
    }

    #[test]
    fn provenance_line_is_a_comment() {
        assert_eq!(provenance("ab", Some(3)), "# fedcov config_hash=ab seed=3\n");
    }
}
