//! Center-side derivation of the covariate design matrix from a named
//! covariate table, e.g. `intercept, sex, age, age^2`.

use nalgebra::DMatrix;

use crate::error::{shape_err, Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CovariateTerm {
    Intercept,
    Linear(String),
    Squared(String),
}

impl CovariateTerm {
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.is_empty() {
            return Err(Error::InvalidConfig("empty covariate term".into()));
        }
        if s.eq_ignore_ascii_case("intercept") || s == "1" {
            return Ok(Self::Intercept);
        }
        if let Some(base) = s.strip_suffix("^2") {
            return Ok(Self::Squared(base.trim().to_string()));
        }
        Ok(Self::Linear(s.to_string()))
    }

    pub fn label(&self) -> String {
        match self {
            Self::Intercept => "intercept".into(),
            Self::Linear(n) => n.clone(),
            Self::Squared(n) => format!("{n}^2"),
        }
    }
}

/// Ordered list of design-matrix terms. Empty means "every table column as is".
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CovariateSpec {
    pub terms: Vec<CovariateTerm>,
}

impl CovariateSpec {
    pub fn parse(s: &str) -> Result<Self> {
        if s.trim().is_empty() {
            return Ok(Self::default());
        }
        Ok(Self {
            terms: s.split(',').map(CovariateTerm::parse).collect::<Result<_>>()?,
        })
    }

    pub fn render(&self) -> String {
        self.terms.iter().map(CovariateTerm::label).collect::<Vec<_>>().join(", ")
    }
}

/// Named numeric covariates for one center, one row per subject.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateTable {
    pub names: Vec<String>,
    pub values: DMatrix<f64>,
}

impl CovariateTable {
    pub fn new(names: Vec<String>, values: DMatrix<f64>) -> Result<Self> {
        if names.len() != values.ncols() {
            return Err(shape_err(format!("{} names for {} columns", names.len(), values.ncols())));
        }
        Ok(Self { names, values })
    }

    fn column(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::InvalidConfig(format!("covariate '{name}' not in table")))
    }

    pub fn derive(&self, spec: &CovariateSpec) -> Result<DMatrix<f64>> {
        if spec.terms.is_empty() {
            return Ok(self.values.clone());
        }
        let n = self.values.nrows();
        let mut out = DMatrix::zeros(n, spec.terms.len());
        for (j, term) in spec.terms.iter().enumerate() {
            match term {
                CovariateTerm::Intercept => out.column_mut(j).fill(1.0),
                CovariateTerm::Linear(name) => out.column_mut(j).copy_from(&self.values.column(self.column(name)?)),
                CovariateTerm::Squared(name) => {
                    let src = self.values.column(self.column(name)?);
                    out.column_mut(j).copy_from(&src.component_mul(&src));
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derives_squared_terms_and_intercept() {
        let table = CovariateTable::new(
            vec!["sex".into(), "age".into()],
            DMatrix::from_row_slice(2, 2, &[0.0, 60.0, 1.0, 70.5]),
        )
        .unwrap();
        let spec = CovariateSpec::parse("intercept, sex, age, age^2").unwrap();
        assert_eq!(spec.render(), "intercept, sex, age, age^2");
        let y = table.derive(&spec).unwrap();
        assert_eq!(y.row(1).iter().copied().collect::<Vec<_>>(), vec![1.0, 1.0, 70.5, 70.5 * 70.5]);
        assert_eq!(table.derive(&CovariateSpec::default()).unwrap(), table.values);
        assert!(table.derive(&CovariateSpec::parse("bmi").unwrap()).is_err());
    }
}
