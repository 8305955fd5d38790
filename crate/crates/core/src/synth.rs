//! Synthetic cohorts with known ground truth.
//!
//! `X = Y W + ε` with standard-normal `Y` and `W`. The noise level is a
//! fraction of the per-entry rms of the clean signal `Y W`, which keeps it
//! independent of matrix size. Rows are drawn once for the pooled cohort and
//! split contiguously, so a given seed yields the same subjects for every
//! center count.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{shape_err, CenterId, Error, Result};
use crate::federation::protocol::{CenterSite, GroundTruth, PipelineConfig};
use crate::federation::transport::InProcessTransport;
use crate::linalg::frobenius;
use crate::oracle::{centralized_pipeline, compare_bases};
use crate::stats::{CenterData, GlobalStats};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub seed: u64,
    pub n_total: usize,
    pub n_features: usize,
    /// Covariate columns, including the intercept when enabled.
    pub q: usize,
    pub n_centers: usize,
    pub noise_frac: f64,
    pub folds: usize,
    /// Replace covariate column 0 by ones.
    pub intercept: bool,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_total: 2400,
            n_features: 500,
            q: 20,
            n_centers: 10,
            noise_frac: 0.2,
            folds: 20,
            intercept: true,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_total", self.n_total),
            ("n_features", self.n_features),
            ("q", self.q),
            ("n_centers", self.n_centers),
            ("folds", self.folds),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::SpecError(format!("{name} must be positive")));
        }
        if !self.n_total.is_multiple_of(self.n_centers) {
            return Err(Error::SpecError(format!(
                "{} subjects do not split evenly over {} centers",
                self.n_total, self.n_centers
            )));
        }
        if !(self.noise_frac >= 0.0 && self.noise_frac.is_finite()) {
            return Err(Error::SpecError(format!("noise_frac must be >= 0, got {}", self.noise_frac)));
        }
        Ok(())
    }

    pub fn subjects_per_center(&self) -> usize {
        self.n_total / self.n_centers
    }

    /// The same cohort parameters with a different seed.
    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub centers: Vec<CenterData>,
    pub w_true: DMatrix<f64>,
    /// `‖Y W‖_F` of the clean signal.
    pub x_norm: f64,
    pub noise_sd: f64,
    pub intercept: bool,
}

impl SynthDataset {
    pub fn n_centers(&self) -> usize {
        self.centers.len()
    }

    /// Pooled `(X, Y)` in center order.
    pub fn pooled(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let n: usize = self.centers.iter().map(CenterData::n_subjects).sum();
        let f = self.w_true.ncols();
        let q = self.w_true.nrows();
        let mut x = DMatrix::zeros(n, f);
        let mut y = DMatrix::zeros(n, q);
        let mut row = 0;
        for c in &self.centers {
            let k = c.n_subjects();
            x.rows_mut(row, k).copy_from(c.x());
            y.rows_mut(row, k).copy_from(c.y());
            row += k;
        }
        (x, y)
    }

    pub fn ground_truth(&self) -> GroundTruth {
        GroundTruth {
            w: self.w_true.clone(),
            intercept_column: self.intercept.then_some(0),
        }
    }

    pub fn sites(&self) -> Vec<CenterSite> {
        self.centers
            .iter()
            .enumerate()
            .map(|(i, d)| CenterSite::new(CenterId(i as u32), d.clone()))
            .collect()
    }
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    // Filled row by row so the stream order is easy to reproduce elsewhere.
    let mut m = DMatrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            m[(i, j)] = rng.sample(StandardNormal);
        }
    }
    m
}

pub fn generate(spec: &SynthSpec) -> Result<SynthDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (n, f, q) = (spec.n_total, spec.n_features, spec.q);
    let mut y = normal_matrix(&mut rng, n, q);
    if spec.intercept {
        y.column_mut(0).fill(1.0);
    }
    let w = normal_matrix(&mut rng, q, f);
    let clean = &y * &w;
    let x_norm = frobenius(&clean);
    let noise_sd = spec.noise_frac * x_norm / ((n * f) as f64).sqrt();
    let x = if noise_sd > 0.0 {
        clean + normal_matrix(&mut rng, n, f) * noise_sd
    } else {
        clean
    };
    let per = spec.subjects_per_center();
    let centers = (0..spec.n_centers)
        .map(|c| CenterData::new(x.rows(c * per, per).into_owned(), y.rows(c * per, per).into_owned()))
        .collect::<Result<_>>()?;
    Ok(SynthDataset {
        centers,
        w_true: w,
        x_norm,
        noise_sd,
        intercept: spec.intercept,
    })
}

/// Maps raw weights into the units of standardized features.
///
/// With `X = Y W` and an intercept in column `c`, standardization gives
/// `X̂ = Y (W - e_c μᵀ) diag(1/σ)`. Without an intercept only the scaling
/// applies. Zero-variance features map to zero.
pub fn standardized_truth(w: &DMatrix<f64>, stats: &GlobalStats, intercept_column: Option<usize>) -> Result<DMatrix<f64>> {
    if w.ncols() != stats.n_features() {
        return Err(shape_err(format!(
            "truth has {} features, statistics {}",
            w.ncols(),
            stats.n_features()
        )));
    }
    let mut out = w.clone();
    if let Some(c) = intercept_column {
        if c >= w.nrows() {
            return Err(shape_err(format!("intercept column {c} outside {} covariates", w.nrows())));
        }
        for j in 0..w.ncols() {
            out[(c, j)] -= stats.mean[j];
        }
    }
    for j in 0..w.ncols() {
        let s = stats.std[j];
        let scale = if s > 0.0 { 1.0 / s } else { 0.0 };
        out.column_mut(j).scale_mut(scale);
    }
    Ok(out)
}

/// Low-rank data with a chosen spectral energy split.
///
/// Rows are `s_i Qᵀ + ε_i` where `Q` has orthonormal columns, component `j`
/// has variance `energies[j] · F` and the isotropic noise has per-entry
/// variance `noise_energy`, so per-row energy fractions follow `energies` and
/// `noise_energy`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralSpec {
    pub seed: u64,
    pub n_total: usize,
    pub n_features: usize,
    pub energies: Vec<f64>,
    pub noise_energy: f64,
}

impl Default for SpectralSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_total: 2400,
            n_features: 500,
            energies: vec![0.35, 0.22, 0.14, 0.09],
            noise_energy: 0.2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SpectralData {
    pub data: DMatrix<f64>,
    /// The planted directions, `F x r`.
    pub directions: DMatrix<f64>,
}

pub fn spectral(spec: &SpectralSpec) -> Result<SpectralData> {
    let r = spec.energies.len();
    if spec.n_total == 0 || spec.n_features == 0 || r == 0 || r > spec.n_features {
        return Err(Error::SpecError("spectral data needs N, F >= 1 and 1 <= r <= F".into()));
    }
    if spec.energies.iter().chain([&spec.noise_energy]).any(|e| !(*e >= 0.0)) {
        return Err(Error::SpecError("energies must be nonnegative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let g = normal_matrix(&mut rng, spec.n_features, r);
    let directions = g.qr().q();
    let mut s = normal_matrix(&mut rng, spec.n_total, r);
    for (j, e) in spec.energies.iter().enumerate() {
        s.column_mut(j).scale_mut((e * spec.n_features as f64).sqrt());
    }
    let noise = normal_matrix(&mut rng, spec.n_total, spec.n_features) * spec.noise_energy.sqrt();
    Ok(SpectralData {
        data: &s * directions.transpose() + noise,
        directions,
    })
}

/// Splits rows contiguously into `c` nearly equal blocks.
pub fn split_rows(m: &DMatrix<f64>, c: usize) -> Vec<DMatrix<f64>> {
    let n = m.nrows();
    let mut out = Vec::with_capacity(c);
    let mut start = 0;
    for i in 0..c {
        let len = n / c + usize::from(i < n % c);
        out.push(m.rows(start, len).into_owned());
        start += len;
    }
    out
}

/// Per-fold seed: a splitmix64 step over the base seed and fold index.
pub fn fold_seed(seed: u64, fold: usize) -> u64 {
    let mut z = seed ^ (fold as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq)]
pub enum FoldRow {
    Mse {
        fold: usize,
        n_centers: usize,
        iteration: usize,
        mse_w: f64,
    },
    Cosine {
        fold: usize,
        n_centers: usize,
        pc_index: usize,
        cosine: f64,
    },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FoldSummary {
    pub rows: Vec<FoldRow>,
}

pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

impl FoldSummary {
    pub fn extend(&mut self, other: FoldSummary) {
        self.rows.extend(other.rows);
    }

    pub fn center_counts(&self) -> Vec<usize> {
        let mut cs: Vec<usize> = self
            .rows
            .iter()
            .map(|r| match r {
                FoldRow::Mse { n_centers, .. } | FoldRow::Cosine { n_centers, .. } => *n_centers,
            })
            .collect();
        cs.sort_unstable();
        cs.dedup();
        cs
    }

    /// MSE series per fold for one center count, in fold order.
    pub fn mse_series(&self, c: usize) -> Vec<Vec<f64>> {
        let mut by_fold: std::collections::BTreeMap<usize, Vec<(usize, f64)>> = Default::default();
        for r in &self.rows {
            if let FoldRow::Mse {
                fold,
                n_centers,
                iteration,
                mse_w,
            } = r
            {
                if *n_centers == c {
                    by_fold.entry(*fold).or_default().push((*iteration, *mse_w));
                }
            }
        }
        by_fold
            .into_values()
            .map(|mut v| {
                v.sort_by_key(|(i, _)| *i);
                v.into_iter().map(|(_, m)| m).collect()
            })
            .collect()
    }

    /// `(iteration, mean, sd)` of the MSE across folds.
    pub fn mse_by_iteration(&self, c: usize) -> Vec<(usize, f64, f64)> {
        let series = self.mse_series(c);
        let len = series.iter().map(Vec::len).min().unwrap_or(0);
        (0..len)
            .map(|i| {
                let vals: Vec<f64> = series.iter().map(|s| s[i]).collect();
                let (m, sd) = mean_sd(&vals);
                (i + 1, m, sd)
            })
            .collect()
    }

    pub fn final_mse(&self, c: usize) -> (f64, f64) {
        let finals: Vec<f64> = self.mse_series(c).iter().filter_map(|s| s.last().copied()).collect();
        mean_sd(&finals)
    }

    /// Fraction of folds whose MSE strictly decreases over the first `n` iterations.
    pub fn monotone_fraction(&self, c: usize, n: usize) -> f64 {
        let series = self.mse_series(c);
        if series.is_empty() {
            return f64::NAN;
        }
        let ok = series
            .iter()
            .filter(|s| s.len() >= n && s[..n].windows(2).all(|w| w[1] < w[0]))
            .count();
        ok as f64 / series.len() as f64
    }

    /// `(pc_index, mean, sd)` of federated-vs-centralized loading cosines.
    pub fn cosines(&self, c: usize) -> Vec<(usize, f64, f64)> {
        let mut by_pc: std::collections::BTreeMap<usize, Vec<f64>> = Default::default();
        for r in &self.rows {
            if let FoldRow::Cosine {
                n_centers,
                pc_index,
                cosine,
                ..
            } = r
            {
                if *n_centers == c {
                    by_pc.entry(*pc_index).or_default().push(*cosine);
                }
            }
        }
        by_pc
            .into_iter()
            .map(|(k, v)| {
                let (m, sd) = mean_sd(&v);
                (k, m, sd)
            })
            .collect()
    }

    /// Long format: `fold,C,iteration,mse_w,pc_index,cosine_similarity`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("fold,C,iteration,mse_w,pc_index,cosine_similarity\n");
        for r in &self.rows {
            match r {
                FoldRow::Mse {
                    fold,
                    n_centers,
                    iteration,
                    mse_w,
                } => s.push_str(&format!("{fold},{n_centers},{iteration},{mse_w:e},,\n")),
                FoldRow::Cosine {
                    fold,
                    n_centers,
                    pc_index,
                    cosine,
                } => s.push_str(&format!("{fold},{n_centers},,,{pc_index},{cosine:.12}\n")),
            }
        }
        s
    }
}

/// Cosines reported per fold are capped at this many leading components.
pub const FOLD_COSINE_COMPONENTS: usize = 10;

/// One federated run on fold `fold`, compared to truth and the centralized oracle.
pub fn run_fold(spec: &SynthSpec, config: &PipelineConfig, fold: usize) -> Result<FoldSummary> {
    let data = generate(&spec.with_seed(fold_seed(spec.seed, fold)))?;
    let sites = data.sites();
    let ids: Vec<CenterId> = sites.iter().map(|s| s.id).collect();
    let mut transport = InProcessTransport::new(&ids);
    let result = crate::federation::pipeline::Pipeline::new(config.clone())
        .with_truth(data.ground_truth())
        .run(sites, &mut transport)?
        .result;
    let c = spec.n_centers;
    let mut rows: Vec<FoldRow> = result
        .trace
        .rows
        .iter()
        .map(|r| FoldRow::Mse {
            fold,
            n_centers: c,
            iteration: r.iteration,
            mse_w: r.mse_vs_truth.unwrap_or(f64::NAN),
        })
        .collect();
    let (x, y) = data.pooled();
    let central = centralized_pipeline(&x, &y)?;
    let m = result.basis.n_components().min(FOLD_COSINE_COMPONENTS);
    let (_, _, cosines) = compare_bases(&result.basis, &central.basis, m)?;
    rows.extend(cosines.into_iter().enumerate().map(|(i, cosine)| FoldRow::Cosine {
        fold,
        n_centers: c,
        pc_index: i + 1,
        cosine,
    }));
    Ok(FoldSummary { rows })
}

/// Runs `spec.folds` independent folds concurrently; rows come back in fold order.
pub fn fold_runner(spec: &SynthSpec, config: &PipelineConfig) -> Result<FoldSummary> {
    spec.validate()?;
    let parts = (0..spec.folds)
        .into_par_iter()
        .map(|fold| run_fold(spec, config, fold))
        .collect::<Result<Vec<_>>>()?;
    let mut out = FoldSummary::default();
    for p in parts {
        out.extend(p);
    }
    Ok(out)
}
