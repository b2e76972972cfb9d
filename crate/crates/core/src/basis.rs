//! Feature maps over the error-free covariates.
//!
//! Regression bases and instrument functions are declared as [`BasisSpec`]
//! terms collected into a [`DesignMap`], evaluated against a dataset into a
//! [`DesignMatrix`], and optionally orthonormalized under the empirical
//! inner product `<u, v> = (1/n) sum_i u_i v_i`.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};

/// Relative tolerance of the Gram-Schmidt rank check.
const GS_RANK_TOL: f64 = 1e-10;

/// A family of basis functions over one or two error-free covariate columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BasisKind {
    /// Powers `c, c^2, ..., c^degree` of one column. Degree 0 contributes no
    /// power columns (use the intercept flag for a constant basis).
    Polynomial { column: usize, degree: usize },
    /// Harmonic pairs `sin(2 pi k t / period), cos(2 pi k t / period)` for
    /// `k = 1..=n_harmonics`.
    Fourier {
        column: usize,
        period: f64,
        n_harmonics: usize,
    },
    /// Indicator columns for levels `1..levels` of an integer-coded column
    /// (level 0 is the reference).
    Dummy { column: usize, levels: usize },
    /// Elementwise products of two parent bases. When both parents include
    /// an intercept the duplicate constant product is dropped.
    Interaction {
        left: Box<BasisSpec>,
        right: Box<BasisSpec>,
    },
    /// A single named monomial expression such as `"c0^2"` or `"c0*c1"`.
    Custom { expr: String },
}

/// One declarative basis term: a function family plus an intercept flag.
/// The intercept column, when present, always comes first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisSpec {
    #[serde(flatten)]
    pub kind: BasisKind,
    #[serde(default)]
    pub include_intercept: bool,
}

impl BasisSpec {
    pub fn polynomial(column: usize, degree: usize, include_intercept: bool) -> Self {
        BasisSpec {
            kind: BasisKind::Polynomial { column, degree },
            include_intercept,
        }
    }

    pub fn fourier(column: usize, period: f64, n_harmonics: usize, include_intercept: bool) -> Self {
        BasisSpec {
            kind: BasisKind::Fourier {
                column,
                period,
                n_harmonics,
            },
            include_intercept,
        }
    }

    pub fn dummy(column: usize, levels: usize) -> Self {
        BasisSpec {
            kind: BasisKind::Dummy { column, levels },
            include_intercept: false,
        }
    }

    /// Constant basis: a single all-ones column.
    pub fn constant() -> Self {
        BasisSpec::polynomial(0, 0, true)
    }

    pub fn custom(expr: &str, include_intercept: bool) -> Self {
        BasisSpec {
            kind: BasisKind::Custom { expr: expr.into() },
            include_intercept,
        }
    }
}

/// A list of basis terms evaluated and concatenated column-wise, with
/// optional sample orthonormalization and column selection (applied after
/// orthonormalization, in that order).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignMap {
    pub terms: Vec<BasisSpec>,
    #[serde(default)]
    pub orthonormalize: bool,
    /// Optional subset of columns to keep, by index into the evaluated
    /// (possibly orthonormalized) matrix.
    #[serde(default)]
    pub columns: Option<Vec<usize>>,
}

impl DesignMap {
    pub fn new(terms: Vec<BasisSpec>) -> Self {
        DesignMap {
            terms,
            orthonormalize: false,
            columns: None,
        }
    }

    pub fn orthonormalized(terms: Vec<BasisSpec>) -> Self {
        DesignMap {
            terms,
            orthonormalize: true,
            columns: None,
        }
    }

    pub fn with_columns(mut self, columns: Vec<usize>) -> Self {
        self.columns = Some(columns);
        self
    }

    /// Evaluates every term against the dataset and applies the
    /// orthonormalization / selection steps.
    pub fn evaluate(&self, data: &Dataset) -> Result<DesignMatrix> {
        if self.terms.is_empty() {
            return Err(Error::InvalidBasis("design map has no terms".into()));
        }
        let mut parts = Vec::with_capacity(self.terms.len());
        for term in &self.terms {
            parts.push(evaluate_basis(term, data)?);
        }
        let mut m = DesignMatrix::hcat(&parts)?;
        if self.orthonormalize {
            m = gram_schmidt_orthonormalize(&m)?;
        }
        if let Some(cols) = &self.columns {
            m = m.select_columns(cols)?;
        }
        Ok(m)
    }

    /// Number of columns the map will produce, before any selection.
    pub fn dim_unselected(&self) -> usize {
        self.terms.iter().map(spec_dim).sum()
    }

    /// Number of columns the map produces.
    pub fn dim(&self) -> usize {
        match &self.columns {
            Some(cols) => cols.len(),
            None => self.dim_unselected(),
        }
    }
}

fn spec_dim(spec: &BasisSpec) -> usize {
    let base = match &spec.kind {
        BasisKind::Polynomial { degree, .. } => *degree,
        BasisKind::Fourier { n_harmonics, .. } => 2 * n_harmonics,
        BasisKind::Dummy { levels, .. } => levels.saturating_sub(1),
        BasisKind::Interaction { left, right } => {
            let l = spec_dim(left);
            let r = spec_dim(right);
            if left.include_intercept && right.include_intercept {
                l * r - 1
            } else {
                l * r
            }
        }
        BasisKind::Custom { .. } => 1,
    };
    base + usize::from(spec.include_intercept)
}

/// An evaluated basis: an `n x d` matrix with column labels.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub values: Array2<f64>,
    pub column_labels: Vec<String>,
    /// Set when columns are orthonormal under the empirical inner product.
    pub orthonormal: bool,
}

impl DesignMatrix {
    pub fn new(values: Array2<f64>, column_labels: Vec<String>) -> Result<Self> {
        if values.ncols() != column_labels.len() {
            return Err(Error::DimensionMismatch {
                what: "design matrix labels".into(),
                expected: values.ncols(),
                found: column_labels.len(),
            });
        }
        Ok(DesignMatrix {
            values,
            column_labels,
            orthonormal: false,
        })
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    fn hcat(parts: &[DesignMatrix]) -> Result<DesignMatrix> {
        let n = parts[0].n();
        let d: usize = parts.iter().map(|p| p.dim()).sum();
        let mut values = Array2::zeros((n, d));
        let mut labels = Vec::with_capacity(d);
        let mut offset = 0;
        for part in parts {
            if part.n() != n {
                return Err(Error::DimensionMismatch {
                    what: "design matrix rows".into(),
                    expected: n,
                    found: part.n(),
                });
            }
            for j in 0..part.dim() {
                values.column_mut(offset + j).assign(&part.values.column(j));
            }
            labels.extend(part.column_labels.iter().cloned());
            offset += part.dim();
        }
        DesignMatrix::new(values, labels)
    }

    fn select_columns(&self, cols: &[usize]) -> Result<DesignMatrix> {
        let mut values = Array2::zeros((self.n(), cols.len()));
        let mut labels = Vec::with_capacity(cols.len());
        for (j, &c) in cols.iter().enumerate() {
            if c >= self.dim() {
                return Err(Error::UnknownColumn {
                    index: c,
                    available: self.dim(),
                });
            }
            values.column_mut(j).assign(&self.values.column(c));
            labels.push(self.column_labels[c].clone());
        }
        Ok(DesignMatrix {
            values,
            column_labels: labels,
            orthonormal: self.orthonormal,
        })
    }
}

fn column(data: &Dataset, index: usize) -> Result<Array1<f64>> {
    if index >= data.dim_c() {
        return Err(Error::UnknownColumn {
            index,
            available: data.dim_c(),
        });
    }
    Ok(data.c.column(index).to_owned())
}

/// Evaluates one basis term into a design matrix, intercept first when
/// included. One output column per basis function.
pub fn evaluate_basis(spec: &BasisSpec, data: &Dataset) -> Result<DesignMatrix> {
    let n = data.n();
    let mut cols: Vec<(String, Array1<f64>)> = Vec::new();
    if spec.include_intercept {
        cols.push(("intercept".into(), Array1::ones(n)));
    }
    match &spec.kind {
        BasisKind::Polynomial { column: c, degree } => {
            let v = column(data, *c)?;
            let mut pow = Array1::ones(n);
            for k in 1..=*degree {
                pow = &pow * &v;
                let label = if k == 1 {
                    format!("c{c}")
                } else {
                    format!("c{c}^{k}")
                };
                cols.push((label, pow.clone()));
            }
        }
        BasisKind::Fourier {
            column: c,
            period,
            n_harmonics,
        } => {
            if *n_harmonics < 1 {
                return Err(Error::InvalidBasis(
                    "fourier basis needs at least one harmonic".into(),
                ));
            }
            if !period.is_finite() || *period <= 0.0 {
                return Err(Error::InvalidBasis(format!(
                    "fourier period must be positive, got {period}"
                )));
            }
            let t = column(data, *c)?;
            for k in 1..=*n_harmonics {
                let omega = 2.0 * std::f64::consts::PI * k as f64 / period;
                cols.push((format!("sin{k}(c{c})"), t.mapv(|v| (omega * v).sin())));
                cols.push((format!("cos{k}(c{c})"), t.mapv(|v| (omega * v).cos())));
            }
        }
        BasisKind::Dummy { column: c, levels } => {
            if *levels < 2 {
                return Err(Error::InvalidBasis(
                    "dummy basis needs at least two levels".into(),
                ));
            }
            let v = column(data, *c)?;
            for (i, &val) in v.iter().enumerate() {
                if val.fract() != 0.0 || val < 0.0 || val >= *levels as f64 {
                    return Err(Error::InvalidBasis(format!(
                        "dummy column c{c} must hold integer levels in 0..{levels}, found {val} at row {i}"
                    )));
                }
            }
            for level in 1..*levels {
                let lv = level as f64;
                cols.push((
                    format!("c{c}=={level}"),
                    v.mapv(|x| if x == lv { 1.0 } else { 0.0 }),
                ));
            }
        }
        BasisKind::Interaction { left, right } => {
            let lm = evaluate_basis(left, data)?;
            let rm = evaluate_basis(right, data)?;
            for (i, ll) in lm.column_labels.iter().enumerate() {
                for (j, rl) in rm.column_labels.iter().enumerate() {
                    let both_intercepts = left.include_intercept
                        && right.include_intercept
                        && i == 0
                        && j == 0;
                    if both_intercepts {
                        continue;
                    }
                    let prod = &lm.values.column(i).to_owned() * &rm.values.column(j);
                    let label = match (ll.as_str(), rl.as_str()) {
                        ("intercept", r) => r.to_string(),
                        (l, "intercept") => l.to_string(),
                        (l, r) => format!("{l}*{r}"),
                    };
                    cols.push((label, prod));
                }
            }
        }
        BasisKind::Custom { expr } => {
            let v = evaluate_custom(expr, data)?;
            cols.push((expr.clone(), v));
        }
    }
    if cols.is_empty() {
        return Err(Error::InvalidBasis(
            "basis term evaluates to zero columns".into(),
        ));
    }
    let mut values = Array2::zeros((n, cols.len()));
    let mut labels = Vec::with_capacity(cols.len());
    for (j, (label, col)) in cols.into_iter().enumerate() {
        for (i, &val) in col.iter().enumerate() {
            if !val.is_finite() {
                return Err(Error::NonFinite {
                    what: format!("basis column '{label}'"),
                    row: i,
                });
            }
            values[[i, j]] = val;
        }
        labels.push(label);
    }
    DesignMatrix::new(values, labels)
}

/// Parses and evaluates a monomial expression: `*`-separated factors, each
/// of the form `c<idx>` or `c<idx>^<power>`.
fn evaluate_custom(expr: &str, data: &Dataset) -> Result<Array1<f64>> {
    let mut out = Array1::ones(data.n());
    for factor in expr.split('*') {
        let factor = factor.trim();
        let body = factor
            .strip_prefix('c')
            .ok_or_else(|| Error::InvalidBasis(format!("cannot parse factor '{factor}' in '{expr}'")))?;
        let (idx_str, power) = match body.split_once('^') {
            Some((i, p)) => {
                let power: u32 = p.parse().map_err(|_| {
                    Error::InvalidBasis(format!("bad exponent '{p}' in '{expr}'"))
                })?;
                (i, power)
            }
            None => (body, 1),
        };
        let idx: usize = idx_str
            .parse()
            .map_err(|_| Error::InvalidBasis(format!("bad column in factor '{factor}'")))?;
        if power == 0 {
            return Err(Error::InvalidBasis(format!(
                "exponent must be at least 1 in '{expr}'"
            )));
        }
        let v = column(data, idx)?;
        for _ in 0..power {
            out = &out * &v;
        }
    }
    Ok(out)
}

/// Classical Gram-Schmidt with one re-orthogonalization pass, under the
/// empirical inner product. Columns are processed in order, so the result
/// depends on column order. Fails with the offending column label when the
/// input is rank deficient at relative tolerance 1e-10.
pub fn gram_schmidt_orthonormalize(m: &DesignMatrix) -> Result<DesignMatrix> {
    let n = m.n();
    let d = m.dim();
    let nf = n as f64;
    let inner = |u: &Array1<f64>, v: &Array1<f64>| u.dot(v) / nf;

    let mut q: Vec<Array1<f64>> = Vec::with_capacity(d);
    for j in 0..d {
        let original = m.values.column(j).to_owned();
        let orig_norm = inner(&original, &original).sqrt();
        if orig_norm == 0.0 {
            return Err(Error::RankDeficient {
                column: m.column_labels[j].clone(),
            });
        }
        let mut v = original;
        // Two projection passes stabilize the classical scheme.
        for _ in 0..2 {
            for qi in &q {
                let proj = inner(&v, qi);
                v = &v - &(proj * qi);
            }
        }
        let norm = inner(&v, &v).sqrt();
        if norm < GS_RANK_TOL * orig_norm {
            return Err(Error::RankDeficient {
                column: m.column_labels[j].clone(),
            });
        }
        q.push(v / norm);
    }

    let mut values = Array2::zeros((n, d));
    for (j, qj) in q.iter().enumerate() {
        values.column_mut(j).assign(qj);
    }
    Ok(DesignMatrix {
        values,
        column_labels: m.column_labels.clone(),
        orthonormal: true,
    })
}
