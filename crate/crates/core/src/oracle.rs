//! Centralized reference computations on pooled data, and metrics comparing
//! federated results against them.
//!
//! The routes here deliberately differ from the federated ones: statistics
//! are computed column by column on the pooled matrix, weights come from a
//! QR least-squares solve, and PCA decomposes the dense `F x F` covariance.

use nalgebra::{DMatrix, DVector};

use crate::error::{shape_err, Error, Result};
use crate::fpca::GlobalBasis;
use crate::linalg::{canonicalize_signs, rel_frobenius, sorted_symmetric_eigen};
use crate::stats::GlobalStats;

#[derive(Debug, Clone)]
pub struct CentralizedResult {
    pub stats: GlobalStats,
    pub w_ols: DMatrix<f64>,
    /// All `F` components of the pooled corrected data.
    pub basis: GlobalBasis,
    pub corrected: DMatrix<f64>,
}

/// Mean, population standard deviation, OLS weights and PCA on pooled data.
pub fn centralized_pipeline(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<CentralizedResult> {
    if x.nrows() != y.nrows() {
        return Err(shape_err(format!("{} feature rows vs {} covariate rows", x.nrows(), y.nrows())));
    }
    if x.nrows() == 0 {
        return Err(Error::EmptyCenter);
    }
    let n = x.nrows() as f64;
    let mean = DVector::from_iterator(x.ncols(), x.column_iter().map(|c| c.mean()));
    let std = DVector::from_iterator(
        x.ncols(),
        x.column_iter()
            .zip(mean.iter())
            .map(|(c, mu)| (c.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n).sqrt()),
    );
    let xhat = DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| {
        if std[j] > 0.0 {
            (x[(i, j)] - mean[j]) / std[j]
        } else {
            0.0
        }
    });
    let w_ols = least_squares(&xhat, y)?;
    let corrected = &xhat - y * &w_ols;
    let basis = centralized_pca(&corrected);
    Ok(CentralizedResult {
        stats: GlobalStats {
            mean,
            std,
            n_total: x.nrows() as u64,
        },
        w_ols,
        basis,
        corrected,
    })
}

/// `argmin_W ‖X - Y W‖_F` by Householder QR of `Y`.
pub fn least_squares(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if y.nrows() < y.ncols() {
        return Err(Error::SingularSystem);
    }
    let qr = y.clone().qr();
    let r = qr.r();
    let diag_max = r.diagonal().amax();
    if diag_max == 0.0 || r.diagonal().iter().any(|d| d.abs() <= 1e-12 * diag_max) {
        return Err(Error::SingularSystem);
    }
    let qtx = qr.q().tr_mul(x);
    r.solve_upper_triangular(&qtx).ok_or(Error::SingularSystem)
}

/// Full eigendecomposition of `E'E`, components sign-canonicalized.
pub fn centralized_pca(e: &DMatrix<f64>) -> GlobalBasis {
    let (values, mut vectors) = sorted_symmetric_eigen(e.tr_mul(e));
    canonicalize_signs(&mut vectors);
    let eigenvalues = values.map(|v| v.max(0.0));
    let trace: f64 = e.iter().map(|v| v * v).sum();
    let explained_fraction = eigenvalues.map(|v| if trace > 0.0 { v / trace } else { 0.0 });
    GlobalBasis {
        components: vectors,
        eigenvalues,
        explained_fraction,
    }
}

/// Principal angles (radians, ascending) between the column spans of two
/// orthonormal bases, from the singular values of `A'B`.
pub fn principal_angles(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<Vec<f64>> {
    if a.nrows() != b.nrows() {
        return Err(shape_err(format!("bases over {} and {} features", a.nrows(), b.nrows())));
    }
    let cross = a.tr_mul(b);
    let mut angles: Vec<f64> = cross
        .svd(false, false)
        .singular_values
        .iter()
        .map(|s| s.clamp(0.0, 1.0).acos())
        .collect();
    angles.sort_by(f64::total_cmp);
    Ok(angles)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonReport {
    pub stats_max_rel_err: f64,
    pub w_rel_frobenius_err: f64,
    pub eigenvalue_rel_errs: Vec<f64>,
    pub principal_angles_rad: Vec<f64>,
    pub pc_cosines: Vec<f64>,
}

impl ComparisonReport {
    pub fn max_eigenvalue_rel_err(&self) -> f64 {
        self.eigenvalue_rel_errs.iter().copied().fold(0.0, f64::max)
    }

    pub fn max_angle(&self) -> f64 {
        self.principal_angles_rad.iter().copied().fold(0.0, f64::max)
    }

    pub fn min_cosine(&self) -> f64 {
        self.pc_cosines.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// One `key = value` line per scalar, indexed keys for vectors.
    pub fn to_kv(&self) -> String {
        let mut out = format!(
            "stats_max_rel_err = {}\nw_rel_frobenius_err = {}\n",
            self.stats_max_rel_err, self.w_rel_frobenius_err
        );
        let vectors = [
            ("eigenvalue_rel_err", &self.eigenvalue_rel_errs),
            ("principal_angle_rad", &self.principal_angles_rad),
            ("pc_cosine", &self.pc_cosines),
        ];
        for (name, vals) in vectors {
            for (i, v) in vals.iter().enumerate() {
                out.push_str(&format!("{name}.{} = {v}\n", i + 1));
            }
        }
        out
    }

    /// `metric,index,value` rows; scalar metrics use index 0.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,index,value\n");
        out.push_str(&format!("stats_max_rel_err,0,{}\n", self.stats_max_rel_err));
        out.push_str(&format!("w_rel_frobenius_err,0,{}\n", self.w_rel_frobenius_err));
        let vectors = [
            ("eigenvalue_rel_err", &self.eigenvalue_rel_errs),
            ("principal_angle_rad", &self.principal_angles_rad),
            ("pc_cosine", &self.pc_cosines),
        ];
        for (name, vals) in vectors {
            for (i, v) in vals.iter().enumerate() {
                out.push_str(&format!("{name},{},{v}\n", i + 1));
            }
        }
        out
    }
}

/// Largest relative deviation of federated statistics. Mean errors are
/// measured against the feature's scale, `max(|mean|, std)`.
pub fn stats_max_rel_err(fed: &GlobalStats, cen: &GlobalStats) -> Result<f64> {
    if fed.n_features() != cen.n_features() {
        return Err(shape_err(format!(
            "statistics over {} and {} features",
            fed.n_features(),
            cen.n_features()
        )));
    }
    let mut worst = 0.0f64;
    for j in 0..cen.n_features() {
        let mean_scale = cen.mean[j].abs().max(cen.std[j]);
        if mean_scale > 0.0 {
            worst = worst.max((fed.mean[j] - cen.mean[j]).abs() / mean_scale);
        }
        if cen.std[j] > 0.0 {
            worst = worst.max((fed.std[j] - cen.std[j]).abs() / cen.std[j]);
        } else {
            worst = worst.max(fed.std[j].abs());
        }
    }
    Ok(worst)
}

/// Eigenvalue errors, principal angles and per-component cosines over the
/// leading `m` components. Cosines are `|u_fed · u_cen|`, invariant to sign.
pub fn compare_bases(fed: &GlobalBasis, cen: &GlobalBasis, m: usize) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    if fed.n_features() != cen.n_features() {
        return Err(shape_err(format!(
            "bases over {} and {} features",
            fed.n_features(),
            cen.n_features()
        )));
    }
    let m = m.min(fed.n_components()).min(cen.n_components());
    let eig = (0..m)
        .map(|j| {
            let c = cen.eigenvalues[j];
            let d = (fed.eigenvalues[j] - c).abs();
            if c > 0.0 {
                d / c
            } else {
                d
            }
        })
        .collect();
    let a = fed.components.columns(0, m).into_owned();
    let b = cen.components.columns(0, m).into_owned();
    let angles = principal_angles(&a, &b)?;
    let cosines = (0..m).map(|j| a.column(j).dot(&b.column(j)).abs()).collect();
    Ok((eig, angles, cosines))
}

pub fn compare(
    fed_stats: &GlobalStats,
    fed_w: &DMatrix<f64>,
    fed_basis: &GlobalBasis,
    centralized: &CentralizedResult,
    m: usize,
) -> Result<ComparisonReport> {
    if fed_w.shape() != centralized.w_ols.shape() {
        return Err(shape_err(format!(
            "weights {:?} vs {:?}",
            fed_w.shape(),
            centralized.w_ols.shape()
        )));
    }
    let (eigenvalue_rel_errs, principal_angles_rad, pc_cosines) = compare_bases(fed_basis, &centralized.basis, m)?;
    Ok(ComparisonReport {
        stats_max_rel_err: stats_max_rel_err(fed_stats, &centralized.stats)?,
        w_rel_frobenius_err: rel_frobenius(fed_w, &centralized.w_ols),
        eigenvalue_rel_errs,
        principal_angles_rad,
        pc_cosines,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(rng))
    }

    #[test]
    fn identical_inputs_compare_clean() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = randn(&mut rng, 60, 8);
        let y = randn(&mut rng, 60, 3);
        let c = centralized_pipeline(&x, &y).unwrap();
        let r = compare(&c.stats, &c.w_ols, &c.basis, &c, 4).unwrap();
        assert_eq!(r.stats_max_rel_err, 0.0);
        assert_eq!(r.w_rel_frobenius_err, 0.0);
        assert!(r.eigenvalue_rel_errs.iter().all(|e| *e == 0.0));
        assert!(r.max_angle() < 1e-7);
        assert!(r.pc_cosines.iter().all(|c| (c - 1.0).abs() < 1e-12));
    }

    #[test]
    fn orthogonal_bases_are_at_right_angles() {
        let a = DMatrix::from_column_slice(3, 1, &[1.0, 0.0, 0.0]);
        let b = DMatrix::from_column_slice(3, 1, &[0.0, 0.0, 1.0]);
        let ang = principal_angles(&a, &b).unwrap();
        assert!((ang[0] - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
        assert_eq!(principal_angles(&a, &b).unwrap(), principal_angles(&b, &a).unwrap());
    }

    #[test]
    fn angles_ignore_column_order_within_span() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let a = randn(&mut rng, 10, 3).qr().q();
        let b = randn(&mut rng, 10, 3).qr().q();
        let b_perm = DMatrix::from_columns(&[b.column(2).into_owned(), b.column(0).into_owned(), -b.column(1)]);
        let x = principal_angles(&a, &b).unwrap();
        let y = principal_angles(&a, &b_perm).unwrap();
        for (p, q) in x.iter().zip(&y) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn pca_trace_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let x = randn(&mut rng, 40, 6);
        let y = randn(&mut rng, 40, 2);
        let c = centralized_pipeline(&x, &y).unwrap();
        let trace: f64 = c.corrected.iter().map(|v| v * v).sum();
        assert!((c.basis.eigenvalues.sum() - trace).abs() < 1e-8 * trace);
    }

    #[test]
    fn rank_deficient_covariates_are_singular() {
        let x = DMatrix::from_element(4, 2, 1.0);
        let mut y = DMatrix::from_element(4, 2, 1.0);
        y[(0, 0)] = 1.0;
        assert!(matches!(centralized_pipeline(&x, &y), Err(Error::SingularSystem)));
    }
}
