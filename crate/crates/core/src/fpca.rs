//! Federated principal component analysis.
//!
//! The global covariance of row-stacked corrected data is the sum of the
//! local contributions, `S = Σ_c E_c'E_c`. Each center shares a truncated
//! eigen-basis `U_c` with singular values `Σ_c`, so that
//! `S ≈ Σ_c U_c Σ_c² U_c'`. The coordinator never forms the `F x F` sum:
//! it stacks `B = [U_1 Σ_1 | ... | U_C Σ_C]` and takes the SVD of `B`, whose
//! left singular vectors and squared singular values are the eigenpairs of
//! `B B'`.

use nalgebra::{DMatrix, DVector};

use crate::error::{shape_err, Error, Result};
use crate::linalg::{canonicalize_signs, sorted_symmetric_eigen};
use crate::wire::{Reader, Writer};

/// Relative tolerance when comparing cumulative variance against a threshold.
const THRESHOLD_SLACK: f64 = 1e-12;
/// Singular values below this fraction of the largest are treated as zero.
const SINGULAR_FLOOR: f64 = 1e-12;

/// A center's truncated eigen-basis of its local covariance contribution.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalEigenpack {
    /// `F x k` with orthonormal columns.
    pub basis: DMatrix<f64>,
    /// Descending, length `k`.
    pub singular_values: DVector<f64>,
    pub n_local: u64,
    /// Fraction of the local total variance retained, in `(0, 1]`.
    pub variance_captured: f64,
}

impl LocalEigenpack {
    pub fn n_features(&self) -> usize {
        self.basis.nrows()
    }

    pub fn rank(&self) -> usize {
        self.basis.ncols()
    }

    /// Retained energy `Σ σ_j²`.
    pub fn retained_energy(&self) -> f64 {
        self.singular_values.iter().map(|s| s * s).sum()
    }

    /// Total local variance `trace(E_c'E_c)`, recovered from the captured fraction.
    pub fn total_energy(&self) -> f64 {
        self.retained_energy() / self.variance_captured
    }

    /// `U_c Σ_c² U_c'`, dense. For tests and small problems only.
    pub fn contribution(&self) -> DMatrix<f64> {
        let weighted = weighted_basis(&self.basis, &self.singular_values);
        &weighted * weighted.transpose()
    }

    /// `F: u64, k: u64, n_local: u64`, then `k` singular values and the
    /// basis in column-major order, all LE `f64`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        self.write(&mut w);
        w.finish()
    }

    pub(crate) fn write(&self, w: &mut Writer) {
        w.u64(self.n_features() as u64).u64(self.rank() as u64).u64(self.n_local);
        w.f64s(self.singular_values.iter());
        w.f64s(self.basis.as_slice());
    }

    /// Decodes the byte layout. The layout does not carry the captured
    /// fraction, so the caller supplies it.
    pub fn from_bytes(bytes: &[u8], variance_captured: f64) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let p = Self::read(&mut r, variance_captured)?;
        r.finish()?;
        Ok(p)
    }

    pub(crate) fn read(r: &mut Reader<'_>, variance_captured: f64) -> Result<Self> {
        let f = r.dim()?;
        let k = r.dim()?;
        let n_local = r.u64()?;
        let singular_values = r.vector(k)?;
        let basis = DMatrix::from_column_slice(f, k, &r.f64_vec(f * k)?);
        if !(variance_captured > 0.0 && variance_captured <= 1.0 + 1e-12) {
            return Err(Error::Wire(format!("variance captured {variance_captured} outside (0, 1]")));
        }
        Ok(Self {
            basis,
            singular_values,
            n_local,
            variance_captured,
        })
    }

    #[cfg(test)]
    pub(crate) fn encoded_len(n_features: usize, k: usize) -> usize {
        24 + 8 * k + 8 * n_features * k
    }
}

fn weighted_basis(basis: &DMatrix<f64>, sv: &DVector<f64>) -> DMatrix<f64> {
    let mut out = basis.clone();
    for (mut col, s) in out.column_iter_mut().zip(sv.iter()) {
        col *= *s;
    }
    out
}

/// Smallest `k` whose leading eigenvalues reach `threshold` of `total`, or
/// all of them when the threshold is out of reach.
fn select_by_threshold(eigenvalues: &[f64], total: f64, threshold: f64) -> usize {
    let mut cum = 0.0;
    for (j, lam) in eigenvalues.iter().enumerate() {
        cum += lam;
        if cum / total >= threshold - THRESHOLD_SLACK {
            return j + 1;
        }
    }
    eigenvalues.len()
}

fn check_threshold(t: f64) -> Result<()> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::InvalidConfig(format!("variance threshold must lie in (0, 1], got {t}")));
    }
    Ok(())
}

/// Truncated eigendecomposition of a center's corrected data `e` (`N_c x F`).
///
/// When `N_c <= F` the eigenvectors come from the `N_c x N_c` Gram matrix
/// `E E'` and are mapped to feature space through `E'`; the mapped columns
/// are finished with a thin SVD so the basis is orthonormal to working
/// precision. Otherwise `E'E` is decomposed directly.
pub fn local_eigendecomposition(e: &DMatrix<f64>, variance_threshold: f64) -> Result<LocalEigenpack> {
    check_threshold(variance_threshold)?;
    let (n, f) = e.shape();
    if n == 0 {
        return Err(Error::EmptyCenter);
    }
    let total: f64 = e.iter().map(|v| v * v).sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::DegenerateData);
    }
    let side = n.min(f);
    // Eigenvalues of a Gram product carry absolute error near eps * λ_max.
    let numerical_zero = side.max(1) as f64 * f64::EPSILON;

    let (eigenvalues, vectors) = if n <= f {
        sorted_symmetric_eigen(e * e.transpose())
    } else {
        sorted_symmetric_eigen(e.tr_mul(e))
    };
    let lam_max = eigenvalues[0].max(0.0);
    let usable: Vec<f64> = eigenvalues
        .iter()
        .take_while(|&&l| l > lam_max * numerical_zero && l.sqrt() >= SINGULAR_FLOOR * lam_max.sqrt())
        .copied()
        .collect();
    if usable.is_empty() {
        return Err(Error::DegenerateData);
    }
    let k = select_by_threshold(&usable, total, variance_threshold);

    let (mut basis, singular_values) = if n <= f {
        let z = e.tr_mul(&vectors.columns(0, k));
        let svd = z.svd(true, false);
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
        let u = svd.u.expect("requested U");
        (
            u.select_columns(order.iter()),
            DVector::from_iterator(k, order.iter().map(|&i| svd.singular_values[i])),
        )
    } else {
        (
            vectors.columns(0, k).into_owned(),
            DVector::from_iterator(k, usable[..k].iter().map(|l| l.sqrt())),
        )
    };
    canonicalize_signs(&mut basis);
    let retained: f64 = singular_values.iter().map(|s| s * s).sum();
    Ok(LocalEigenpack {
        basis,
        singular_values,
        n_local: n as u64,
        variance_captured: (retained / total).min(1.0),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ComponentSelection {
    Count(usize),
    /// Smallest `m` whose cumulative explained fraction reaches the value.
    Threshold(f64),
}

/// Global components `U` (`F x m`), eigenvalues of `S` and their share of
/// the total variance.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalBasis {
    pub components: DMatrix<f64>,
    pub eigenvalues: DVector<f64>,
    pub explained_fraction: DVector<f64>,
}

impl GlobalBasis {
    pub fn n_features(&self) -> usize {
        self.components.nrows()
    }

    pub fn n_components(&self) -> usize {
        self.components.ncols()
    }

    /// Keeps the leading `m` components.
    pub fn truncated(&self, m: usize) -> GlobalBasis {
        let m = m.min(self.n_components());
        GlobalBasis {
            components: self.components.columns(0, m).into_owned(),
            eigenvalues: self.eigenvalues.rows(0, m).into_owned(),
            explained_fraction: self.explained_fraction.rows(0, m).into_owned(),
        }
    }

    /// `F: u64, m: u64`, then `m` eigenvalues, `m` explained fractions and the
    /// components in column-major order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        self.write(&mut w);
        w.finish()
    }

    pub(crate) fn write(&self, w: &mut Writer) {
        w.u64(self.n_features() as u64).u64(self.n_components() as u64);
        w.f64s(self.eigenvalues.iter()).f64s(self.explained_fraction.iter());
        w.f64s(self.components.as_slice());
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let b = Self::read(&mut r)?;
        r.finish()?;
        Ok(b)
    }

    pub(crate) fn read(r: &mut Reader<'_>) -> Result<Self> {
        let f = r.dim()?;
        let m = r.dim()?;
        let eigenvalues = r.vector(m)?;
        let explained_fraction = r.vector(m)?;
        let components = DMatrix::from_column_slice(f, m, &r.f64_vec(f * m)?);
        Ok(Self {
            components,
            eigenvalues,
            explained_fraction,
        })
    }

    #[cfg(test)]
    pub(crate) fn encoded_len(n_features: usize, m: usize) -> usize {
        16 + 16 * m + 8 * n_features * m
    }
}

/// Combines local eigenpacks (in the given order) into a global basis.
pub fn aggregate(packs: &[LocalEigenpack], selection: ComponentSelection) -> Result<GlobalBasis> {
    let first = packs.first().ok_or(Error::NoCenters)?;
    let f = first.n_features();
    if let Some(bad) = packs.iter().find(|p| p.n_features() != f) {
        return Err(shape_err(format!("eigenpack over {} features, expected {f}", bad.n_features())));
    }
    match selection {
        ComponentSelection::Count(0) => return Err(Error::InvalidConfig("m must be at least 1".into())),
        ComponentSelection::Threshold(t) => check_threshold(t)?,
        ComponentSelection::Count(_) => {}
    }
    let width: usize = packs.iter().map(|p| p.rank()).sum();
    let mut stacked = DMatrix::zeros(f, width);
    let mut offset = 0;
    for p in packs {
        stacked
            .columns_mut(offset, p.rank())
            .copy_from(&weighted_basis(&p.basis, &p.singular_values));
        offset += p.rank();
    }
    let total: f64 = packs.iter().map(|p| p.total_energy()).sum();

    let svd = stacked.svd(true, false);
    let u = svd.u.expect("requested U");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]).then(a.cmp(&b)));
    let s_max = svd.singular_values[order[0]];
    order.retain(|&i| svd.singular_values[i] > SINGULAR_FLOOR * s_max);
    let eigen: Vec<f64> = order.iter().map(|&i| svd.singular_values[i].powi(2)).collect();

    let m = match selection {
        ComponentSelection::Count(m) => m.min(eigen.len()),
        ComponentSelection::Threshold(t) => select_by_threshold(&eigen, total, t),
    };
    let mut components = u.select_columns(order[..m].iter());
    canonicalize_signs(&mut components);
    let eigenvalues = DVector::from_column_slice(&eigen[..m]);
    let explained_fraction = eigenvalues.map(|l| l / total);
    Ok(GlobalBasis {
        components,
        eigenvalues,
        explained_fraction,
    })
}

/// Low-dimensional coordinates `Ê = E U` (`N_c x m`).
#[derive(Debug, Clone, PartialEq)]
pub struct Scores(pub DMatrix<f64>);

pub fn project(e: &DMatrix<f64>, basis: &GlobalBasis) -> Result<Scores> {
    if e.ncols() != basis.n_features() {
        return Err(shape_err(format!(
            "data has {} features, basis {}",
            e.ncols(),
            basis.n_features()
        )));
    }
    Ok(Scores(e * &basis.components))
}
