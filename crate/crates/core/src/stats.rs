//! Mergeable per-feature moments and standardization against global
//! statistics.
//!
//! Each center summarizes its feature matrix as a [`FeatureMoments`]
//! (count, mean, sum of squared deviations). Summaries combine with the
//! pairwise parallel update
//!
//! ```text
//! delta = mean_b - mean_a
//! mean  = mean_a + delta * n_b / n
//! m2    = m2_a + m2_b + delta^2 * n_a * n_b / n
//! ```
//!
//! which is exact for any grouping of the underlying rows, so the
//! coordinator can fold center summaries in any order.

use nalgebra::{DMatrix, DVector};

use crate::error::{shape_err, Error, Result};
use crate::wire::{Reader, Writer};

/// Count, mean and sum of squared deviations for each of `F` features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMoments {
    count: u64,
    mean: DVector<f64>,
    m2: DVector<f64>,
}

impl FeatureMoments {
    /// The identity element of [`merge`](Self::merge).
    pub fn empty(n_features: usize) -> Self {
        Self {
            count: 0,
            mean: DVector::zeros(n_features),
            m2: DVector::zeros(n_features),
        }
    }

    /// Summarizes a local `N_c x F` feature matrix (two-pass, batch).
    pub fn accumulate(x: &DMatrix<f64>) -> Result<Self> {
        let n = x.nrows();
        if n == 0 {
            return Err(Error::EmptyCenter);
        }
        let f = x.ncols();
        let mut mean = DVector::zeros(f);
        let mut m2 = DVector::zeros(f);
        for j in 0..f {
            let col = x.column(j);
            let mu = col.sum() / n as f64;
            mean[j] = mu;
            m2[j] = col.iter().map(|v| (v - mu) * (v - mu)).sum();
        }
        Ok(Self { count: n as u64, mean, m2 })
    }

    pub fn from_parts(count: u64, mean: DVector<f64>, m2: DVector<f64>) -> Result<Self> {
        if mean.len() != m2.len() {
            return Err(shape_err(format!("mean has {} entries, m2 has {}", mean.len(), m2.len())));
        }
        if count == 0 && (mean.iter().any(|v| *v != 0.0) || m2.iter().any(|v| *v != 0.0)) {
            return Err(Error::Wire("empty moments must be all-zero".into()));
        }
        if m2.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Wire("negative or non-finite m2".into()));
        }
        Ok(Self { count, mean, m2 })
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn n_features(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn m2(&self) -> &DVector<f64> {
        &self.m2
    }

    pub fn merge(&self, other: &Self) -> Result<Self> {
        if self.n_features() != other.n_features() {
            return Err(shape_err(format!(
                "cannot merge moments over {} and {} features",
                self.n_features(),
                other.n_features()
            )));
        }
        if other.count == 0 {
            return Ok(self.clone());
        }
        if self.count == 0 {
            return Ok(other.clone());
        }
        let na = self.count as f64;
        let nb = other.count as f64;
        let n = na + nb;
        let mut mean = DVector::zeros(self.n_features());
        let mut m2 = DVector::zeros(self.n_features());
        for j in 0..self.n_features() {
            let delta = other.mean[j] - self.mean[j];
            mean[j] = self.mean[j] + delta * (nb / n);
            m2[j] = self.m2[j] + other.m2[j] + delta * delta * (na * nb / n);
        }
        Ok(Self {
            count: self.count + other.count,
            mean,
            m2,
        })
    }

    /// Folds summaries left to right. Callers that need order-independent bits
    /// must supply a canonical order.
    pub fn merge_all<'a>(parts: impl IntoIterator<Item = &'a FeatureMoments>) -> Result<Option<Self>> {
        let mut acc: Option<Self> = None;
        for p in parts {
            acc = Some(match acc {
                None => p.clone(),
                Some(a) => a.merge(p)?,
            });
        }
        Ok(acc)
    }

    /// Population mean and standard deviation.
    pub fn finalize(&self) -> Result<GlobalStats> {
        if self.count == 0 {
            return Err(Error::EmptyAccumulator);
        }
        let n = self.count as f64;
        let std = self.m2.map(|v| (v / n).sqrt());
        Ok(GlobalStats {
            mean: self.mean.clone(),
            std,
            n_total: self.count,
        })
    }

    /// `F: u64, count: u64`, then `F` means and `F` m2 values as LE `f64`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        self.write(&mut w);
        w.finish()
    }

    pub(crate) fn write(&self, w: &mut Writer) {
        w.u64(self.n_features() as u64).u64(self.count);
        w.f64s(self.mean.iter()).f64s(self.m2.iter());
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let m = Self::read(&mut r)?;
        r.finish()?;
        Ok(m)
    }

    pub(crate) fn read(r: &mut Reader<'_>) -> Result<Self> {
        let f = r.dim()?;
        let count = r.u64()?;
        let mean = r.vector(f)?;
        let m2 = r.vector(f)?;
        Self::from_parts(count, mean, m2)
    }

    #[cfg(test)]
    pub(crate) fn encoded_len(n_features: usize) -> usize {
        16 + 16 * n_features
    }
}

/// Global per-feature mean and population standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalStats {
    pub mean: DVector<f64>,
    pub std: DVector<f64>,
    pub n_total: u64,
}

impl GlobalStats {
    pub fn n_features(&self) -> usize {
        self.mean.len()
    }

    /// `(x - mean) / std` column-wise; zero-variance columns map to 0.
    pub fn standardize(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_width(x)?;
        let mut out = x.clone();
        for (j, mut col) in out.column_iter_mut().enumerate() {
            let (mu, sd) = (self.mean[j], self.std[j]);
            if sd > 0.0 {
                col.apply(|v| *v = (*v - mu) / sd);
            } else {
                col.fill(0.0);
            }
        }
        Ok(out)
    }

    /// Inverse of [`standardize`](Self::standardize) on nonzero-std columns;
    /// zero-variance columns come back as their mean.
    pub fn destandardize(&self, xhat: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_width(xhat)?;
        let mut out = xhat.clone();
        for (j, mut col) in out.column_iter_mut().enumerate() {
            let (mu, sd) = (self.mean[j], self.std[j]);
            col.apply(|v| *v = *v * sd + mu);
        }
        Ok(out)
    }

    fn check_width(&self, x: &DMatrix<f64>) -> Result<()> {
        if x.ncols() != self.n_features() {
            return Err(shape_err(format!(
                "matrix has {} features, statistics cover {}",
                x.ncols(),
                self.n_features()
            )));
        }
        Ok(())
    }
}

/// A center's raw features `x` (`N_c x F`) and covariates `y` (`N_c x q`).
#[derive(Debug, Clone, PartialEq)]
pub struct CenterData {
    x: DMatrix<f64>,
    y: DMatrix<f64>,
}

impl CenterData {
    pub fn new(x: DMatrix<f64>, y: DMatrix<f64>) -> Result<Self> {
        if x.nrows() == 0 {
            return Err(Error::EmptyCenter);
        }
        if x.nrows() != y.nrows() {
            return Err(shape_err(format!(
                "features have {} rows, covariates {}",
                x.nrows(),
                y.nrows()
            )));
        }
        Ok(Self { x, y })
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &DMatrix<f64> {
        &self.y
    }

    pub fn n_subjects(&self) -> usize {
        self.x.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.x.ncols()
    }

    pub fn n_covariates(&self) -> usize {
        self.y.ncols()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn col(v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_column_slice(v.len(), 1, v)
    }

    // Independent oracle: direct mean and population variance of a slice.
    fn direct(v: &[f64]) -> (f64, f64) {
        let n = v.len() as f64;
        let mu = v.iter().sum::<f64>() / n;
        (mu, v.iter().map(|x| (x - mu).powi(2)).sum::<f64>())
    }

    #[test]
    fn accumulate_two_values() {
        let m = FeatureMoments::accumulate(&col(&[1.0, 2.0])).unwrap();
        assert_eq!(m.count(), 2);
        assert_eq!(m.mean()[0], 1.5);
        assert_eq!(m.m2()[0], 0.5);
        assert_eq!(direct(&[1.0, 2.0]), (1.5, 0.5));
    }

    #[test]
    fn accumulate_constant_and_single_row() {
        let m = FeatureMoments::accumulate(&col(&[5.0, 5.0, 5.0])).unwrap();
        assert_eq!((m.mean()[0], m.m2()[0]), (5.0, 0.0));
        let m = FeatureMoments::accumulate(&col(&[3.0])).unwrap();
        assert_eq!((m.count(), m.mean()[0], m.m2()[0]), (1, 3.0, 0.0));
    }

    #[test]
    fn accumulate_rejects_empty() {
        let x = DMatrix::<f64>::zeros(0, 3);
        assert!(matches!(FeatureMoments::accumulate(&x), Err(Error::EmptyCenter)));
    }

    #[test]
    fn merge_matches_concatenation() {
        let a = FeatureMoments::accumulate(&col(&[1.0, 2.0])).unwrap();
        let b = FeatureMoments::accumulate(&col(&[4.0, 6.0])).unwrap();
        let (mu, m2) = direct(&[1.0, 2.0, 4.0, 6.0]);
        assert_eq!((mu, m2), (3.25, 14.75));
        let ab = a.merge(&b).unwrap();
        assert_eq!(ab.count(), 4);
        assert!((ab.mean()[0] - 3.25).abs() < 1e-15);
        assert!((ab.m2()[0] - 14.75).abs() < 1e-12);
        assert_eq!(ab, b.merge(&a).unwrap());

        let s = ab.finalize().unwrap();
        assert!((s.std[0] - 3.6875f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn merge_with_empty_is_identity() {
        let a = FeatureMoments::accumulate(&col(&[1.0, 7.0, -2.0])).unwrap();
        assert_eq!(a.merge(&FeatureMoments::empty(1)).unwrap(), a);
        assert_eq!(FeatureMoments::empty(1).merge(&a).unwrap(), a);
    }

    #[test]
    fn merge_rejects_width_mismatch() {
        let a = FeatureMoments::empty(2);
        let b = FeatureMoments::empty(3);
        assert!(matches!(a.merge(&b), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn finalize_edge_cases() {
        assert!(matches!(FeatureMoments::empty(2).finalize(), Err(Error::EmptyAccumulator)));
        let one = FeatureMoments::accumulate(&col(&[9.0])).unwrap().finalize().unwrap();
        assert_eq!(one.std[0], 0.0);
        let flat = FeatureMoments::accumulate(&col(&[2.0, 2.0])).unwrap().finalize().unwrap();
        assert_eq!(flat.std[0], 0.0);
    }

    #[test]
    fn standardize_identity_and_zero_variance() {
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 4.0, -1.0, 4.0]);
        let s = FeatureMoments::accumulate(&x).unwrap().finalize().unwrap();
        assert_eq!(s.std[0], 1.0);
        let z = s.standardize(&x).unwrap();
        assert!((z[(0, 0)] - 1.0).abs() < 1e-12 && (z[(1, 0)] + 1.0).abs() < 1e-12);
        assert_eq!(z.column(1).iter().copied().collect::<Vec<_>>(), vec![0.0, 0.0]);

        let bad = DMatrix::<f64>::zeros(2, 3);
        assert!(matches!(s.standardize(&bad), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn center_data_validates_rows() {
        assert!(CenterData::new(DMatrix::zeros(2, 3), DMatrix::zeros(3, 1)).is_err());
        assert!(matches!(
            CenterData::new(DMatrix::zeros(0, 3), DMatrix::zeros(0, 1)),
            Err(Error::EmptyCenter)
        ));
    }

    #[test]
    fn rejects_malformed_payloads() {
        let m = FeatureMoments::accumulate(&col(&[1.0, 2.0])).unwrap();
        let bytes = m.to_bytes();
        assert_eq!(bytes.len(), FeatureMoments::encoded_len(1));
        assert!(FeatureMoments::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let neg = FeatureMoments::from_parts(2, DVector::from_element(1, 0.0), DVector::from_element(1, -1.0));
        assert!(neg.is_err());
    }

    fn matrix_strategy() -> impl Strategy<Value = (DMatrix<f64>, Vec<usize>)> {
        (1usize..40, 1usize..6).prop_flat_map(|(n, f)| {
            (
                proptest::collection::vec(-1e3f64..1e3, n * f),
                proptest::collection::vec(0usize..n, 0..5),
            )
                .prop_map(move |(vals, cuts)| (DMatrix::from_row_slice(n, f, &vals), cuts))
        })
    }

    proptest! {
        #[test]
        fn partition_merge_equals_centralized((x, mut cuts) in matrix_strategy()) {
            cuts.push(0);
            cuts.push(x.nrows());
            cuts.sort_unstable();
            cuts.dedup();
            let parts: Vec<_> = cuts
                .windows(2)
                .map(|w| FeatureMoments::accumulate(&x.rows(w[0], w[1] - w[0]).into_owned()).unwrap())
                .collect();
            let whole = FeatureMoments::accumulate(&x).unwrap().finalize().unwrap();
            let fwd = FeatureMoments::merge_all(parts.iter()).unwrap().unwrap().finalize().unwrap();
            let rev = FeatureMoments::merge_all(parts.iter().rev()).unwrap().unwrap().finalize().unwrap();
            for j in 0..x.ncols() {
                let scale = whole.std[j].max(whole.mean[j].abs()).max(1.0);
                for s in [&fwd, &rev] {
                    prop_assert!((s.mean[j] - whole.mean[j]).abs() <= 1e-10 * scale);
                    prop_assert!((s.std[j] - whole.std[j]).abs() <= 1e-9 * scale);
                }
            }
        }

        #[test]
        fn byte_layout_round_trip((x, _) in matrix_strategy()) {
            let m = FeatureMoments::accumulate(&x).unwrap();
            let bytes = m.to_bytes();
            prop_assert_eq!(bytes.len(), FeatureMoments::encoded_len(x.ncols()));
            prop_assert_eq!(FeatureMoments::from_bytes(&bytes).unwrap(), m);
        }

        #[test]
        fn standardize_inverts((x, _) in matrix_strategy()) {
            let s = FeatureMoments::accumulate(&x).unwrap().finalize().unwrap();
            let back = s.destandardize(&s.standardize(&x).unwrap()).unwrap();
            for j in 0..x.ncols() {
                if s.std[j] > 1e-6 {
                    for i in 0..x.nrows() {
                        prop_assert!((back[(i, j)] - x[(i, j)]).abs() <= 1e-9 * (1.0 + x[(i, j)].abs()));
                    }
                }
            }
        }
    }
}
