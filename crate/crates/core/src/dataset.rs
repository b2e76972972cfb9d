use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

/// How the exposure variable is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExposureKind {
    Continuous,
    /// Exposure takes values in {0, 1}.
    Binary,
    /// Exposure is a nonnegative integer count.
    Count,
}

/// An observed sample: outcome `y`, exposure `a`, error-free covariates `c`,
/// and error-prone covariates `x` (all with one row per observation).
///
/// Latent quantities (the true error-prone covariate and its measurement
/// error) never appear here; the data model is strictly what an analyst
/// observes.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub y: Array1<f64>,
    pub a: Array1<f64>,
    pub c: Array2<f64>,
    pub x: Array2<f64>,
}

impl Dataset {
    /// Builds a dataset, checking shape agreement and finiteness.
    pub fn new(y: Array1<f64>, a: Array1<f64>, c: Array2<f64>, x: Array2<f64>) -> Result<Self> {
        let n = y.len();
        if a.len() != n {
            return Err(Error::DimensionMismatch {
                what: "exposure length".into(),
                expected: n,
                found: a.len(),
            });
        }
        if c.nrows() != n {
            return Err(Error::DimensionMismatch {
                what: "error-free covariate rows".into(),
                expected: n,
                found: c.nrows(),
            });
        }
        if x.nrows() != n {
            return Err(Error::DimensionMismatch {
                what: "error-prone covariate rows".into(),
                expected: n,
                found: x.nrows(),
            });
        }
        for (i, v) in y.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    what: "outcome".into(),
                    row: i,
                });
            }
        }
        for (i, v) in a.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    what: "exposure".into(),
                    row: i,
                });
            }
        }
        for (i, row) in c.rows().into_iter().enumerate() {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    what: "error-free covariates".into(),
                    row: i,
                });
            }
        }
        for (i, row) in x.rows().into_iter().enumerate() {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    what: "error-prone covariates".into(),
                    row: i,
                });
            }
        }
        Ok(Dataset { y, a, c, x })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    /// Number of error-free covariate columns.
    pub fn dim_c(&self) -> usize {
        self.c.ncols()
    }

    /// Number of error-prone covariate columns.
    pub fn dim_x(&self) -> usize {
        self.x.ncols()
    }

    /// Checks that the exposure values are admissible for `kind`.
    pub fn check_exposure(&self, kind: ExposureKind) -> Result<()> {
        match kind {
            ExposureKind::Continuous => Ok(()),
            ExposureKind::Binary => {
                for (i, &v) in self.a.iter().enumerate() {
                    if v != 0.0 && v != 1.0 {
                        return Err(Error::InvalidData(format!(
                            "binary exposure must be 0 or 1, found {v} at row {i}"
                        )));
                    }
                }
                Ok(())
            }
            ExposureKind::Count => {
                for (i, &v) in self.a.iter().enumerate() {
                    if v < 0.0 || v.fract() != 0.0 {
                        return Err(Error::InvalidData(format!(
                            "count exposure must be a nonnegative integer, found {v} at row {i}"
                        )));
                    }
                }
                Ok(())
            }
        }
    }
}

/// Returns a copy of the dataset with the outcome replaced by the
/// shifted outcome `y - psi * a`. All other columns are untouched.
///
/// Under an additive structural model with effect `psi`, the shifted
/// outcome behaves like an instrument for the association between the
/// latent covariate and the exposure, which is what makes profile
/// estimation of the effect possible.
pub fn structural_shift(data: &Dataset, psi: f64) -> Result<Dataset> {
    if !psi.is_finite() {
        return Err(Error::InvalidData(format!("shift must be finite, got {psi}")));
    }
    let h = &data.y - &(psi * &data.a);
    Ok(Dataset {
        y: h,
        a: data.a.clone(),
        c: data.c.clone(),
        x: data.x.clone(),
    })
}
