//! Shared statistical utilities: OLS with heteroskedasticity-robust
//! covariance, Wald p-values, and a Kolmogorov-Smirnov uniformity test.

use ndarray::{Array1, Array2};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::linalg;

/// An OLS fit with the HC0 sandwich covariance.
pub struct OlsFit {
    pub beta: Array1<f64>,
    pub hc0_cov: Array2<f64>,
    pub residuals: Array1<f64>,
}

/// Ordinary least squares of `y` on `design` with the HC0 covariance
/// `(X'X)^{-1} X' diag(e^2) X (X'X)^{-1}`.
pub fn ols_hc0(y: &Array1<f64>, design: &Array2<f64>) -> Result<OlsFit> {
    let n = design.nrows();
    let k = design.ncols();
    if y.len() != n {
        return Err(Error::DimensionMismatch {
            what: "regression outcome".into(),
            expected: n,
            found: y.len(),
        });
    }
    if n <= k {
        return Err(Error::InvalidData(format!(
            "need more observations ({n}) than regressors ({k})"
        )));
    }
    let xtx = design.t().dot(design);
    let xty = design.t().dot(y);
    let beta = linalg::solve_spd(&xtx, &xty).map_err(|_| Error::SingularMatrix {
        what: "regression design".into(),
    })?;
    let fitted = design.dot(&beta);
    let residuals = y - &fitted;

    // Meat: X' diag(e^2) X.
    let mut meat = Array2::zeros((k, k));
    for i in 0..n {
        let e2 = residuals[i] * residuals[i];
        for r in 0..k {
            let xr = design[[i, r]];
            for c in 0..k {
                meat[[r, c]] += e2 * xr * design[[i, c]];
            }
        }
    }
    // Bread: (X'X)^{-1} applied on both sides via solves.
    let inv = SpdSolveMat::new(&xtx)?;
    let half = inv.solve(&meat);
    let hc0_cov = inv.solve(&half.t().to_owned());
    Ok(OlsFit {
        beta,
        hc0_cov,
        residuals,
    })
}

struct SpdSolveMat {
    inv: linalg::SpdInverse,
}

impl SpdSolveMat {
    fn new(a: &Array2<f64>) -> Result<Self> {
        Ok(SpdSolveMat {
            inv: linalg::SpdInverse::new(a)?,
        })
    }

    fn solve(&self, m: &Array2<f64>) -> Array2<f64> {
        self.inv.solve_mat(m)
    }
}

/// Two-sided Wald p-value for one coefficient of an HC0 OLS fit.
/// A coefficient that is exactly zero with zero variance (degenerate data)
/// yields p = 1.
pub fn wald_pvalue(fit: &OlsFit, coef: usize) -> f64 {
    let b = fit.beta[coef];
    let se = fit.hc0_cov[[coef, coef]].max(0.0).sqrt();
    if se == 0.0 {
        return if b == 0.0 { 1.0 } else { 0.0 };
    }
    let z = (b / se).abs();
    2.0 * normal_sf(z)
}

/// Upper tail of the standard normal.
pub fn normal_sf(z: f64) -> f64 {
    let normal = Normal::new(0.0, 1.0).unwrap();
    1.0 - normal.cdf(z)
}

/// Kolmogorov-Smirnov statistic and asymptotic p-value of a sample against
/// Uniform(0, 1). Uses the standard small-sample adjustment of the
/// Kolmogorov distribution argument.
pub fn ks_test_uniform(sample: &[f64]) -> (f64, f64) {
    let n = sample.len();
    assert!(n > 0, "empty sample");
    let mut sorted: Vec<f64> = sample.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let nf = n as f64;
    let mut d = 0.0f64;
    for (i, &u) in sorted.iter().enumerate() {
        let u = u.clamp(0.0, 1.0);
        d = d.max((i as f64 + 1.0) / nf - u);
        d = d.max(u - i as f64 / nf);
    }
    let sqrt_n = nf.sqrt();
    let lambda = (sqrt_n + 0.12 + 0.11 / sqrt_n) * d;
    (d, kolmogorov_sf(lambda))
}

/// Survival function of the Kolmogorov distribution,
/// `Q(x) = 2 sum_{k>=1} (-1)^{k-1} exp(-2 k^2 x^2)`.
fn kolmogorov_sf(x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for k in 1..=100 {
        let term = (-2.0 * (k as f64) * (k as f64) * x * x).exp();
        sum += sign * term;
        sign = -sign;
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}
