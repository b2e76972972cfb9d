//! Efficiency-optimal instrument functions for the continuous
//! propensity-score estimating equations, built from plug-in conditional
//! moments given the error-free covariates.
//!
//! For each of the three partitioned instrument blocks the optimal pair
//! `(l_k, m_k)` solves, row by row, the 2x2 conditional-moment system
//!
//! ```text
//! [ E{D^2 H^2 | C}  E{D^2 H | C} ] [ l_k ]   [ E(V_k | C) ]
//! [ E{D^2 H | C}    E{D^2   | C} ] [ m_k ] = [ E(W_k | C) ]
//! ```
//!
//! with `D` the exposure residual, `H` the shifted outcome, and
//! `(V, W)` the cross-moment targets of the three blocks: the exposure
//! product, the baseline-gradient block, and the interaction block.

use ndarray::{Array1, Array2};
use serde::Serialize;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::linalg;
use crate::moments::{exposure_residuals, MomentSystem, ParamVector};
use crate::basis::DesignMap;

/// Where conditional-moment estimates came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MomentSource {
    /// Supplied analytically (oracle values).
    Analytic,
    /// Estimated by least-squares projection on a basis of the error-free
    /// covariates.
    Regression,
}

/// Per-observation estimates of the conditional moments entering the
/// optimal-instrument construction. All vectors have one entry per row;
/// `x` and `hx` have one column per error-prone covariate.
#[derive(Debug, Clone)]
pub struct ConditionalMomentSet {
    pub source: MomentSource,
    /// `E{D^2 | C}`.
    pub d2: Array1<f64>,
    /// `E{D^2 H | C}`.
    pub d2h: Array1<f64>,
    /// `E{D^2 H^2 | C}`.
    pub d2h2: Array1<f64>,
    /// `E{D A | C}`.
    pub da: Array1<f64>,
    /// `E{H | C}`.
    pub h: Array1<f64>,
    /// `E{X | C}`.
    pub x: Array2<f64>,
    /// `E{H X | C}`.
    pub hx: Array2<f64>,
    /// Rows whose variance-like estimates were floored during fitting.
    pub floored: usize,
    /// Stacked projection score rows (regression source only): for each
    /// fitted conditional model, the basis-weighted fitting residuals.
    /// Mean-zero at the fitted coefficients by least-squares orthogonality;
    /// callers accounting for instrument estimation can append them to the
    /// moment stack.
    pub projection_scores: Option<Array2<f64>>,
}

impl ConditionalMomentSet {
    /// Assembles a set from parts, checking shapes.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        source: MomentSource,
        d2: Array1<f64>,
        d2h: Array1<f64>,
        d2h2: Array1<f64>,
        da: Array1<f64>,
        h: Array1<f64>,
        x: Array2<f64>,
        hx: Array2<f64>,
    ) -> Result<Self> {
        let n = d2.len();
        for (name, len) in [
            ("d2h", d2h.len()),
            ("d2h2", d2h2.len()),
            ("da", da.len()),
            ("h", h.len()),
            ("x rows", x.nrows()),
            ("hx rows", hx.nrows()),
        ] {
            if len != n {
                return Err(Error::DimensionMismatch {
                    what: format!("conditional moments ({name})"),
                    expected: n,
                    found: len,
                });
            }
        }
        if x.ncols() != hx.ncols() {
            return Err(Error::DimensionMismatch {
                what: "conditional moments (hx columns)".into(),
                expected: x.ncols(),
                found: hx.ncols(),
            });
        }
        Ok(ConditionalMomentSet {
            source,
            d2,
            d2h,
            d2h2,
            da,
            h,
            x,
            hx,
            floored: 0,
            projection_scores: None,
        })
    }

    pub fn n(&self) -> usize {
        self.d2.len()
    }

    pub fn dim_x(&self) -> usize {
        self.x.ncols()
    }

    /// Per-row determinant `d(C) = E{D^2 H^2|C} E{D^2|C} - E{D^2 H|C}^2`,
    /// strictly positive for nondegenerate `H` by Cauchy-Schwarz.
    pub fn d_values(&self) -> Array1<f64> {
        Array1::from_shape_fn(self.n(), |i| {
            self.d2h2[i] * self.d2[i] - self.d2h[i] * self.d2h[i]
        })
    }
}

/// Estimates each conditional moment by least-squares projection of the
/// realized per-row product on `proj_basis` evaluated over the error-free
/// covariates. Negative fitted values of the two variance-like quantities
/// are floored at `1e-10` times their realized scale, with a diagnostic
/// count; a column whose fit is entirely floored is degenerate.
pub fn fit_conditional_moments(
    system: &MomentSystem,
    data: &Dataset,
    theta: &ParamVector,
    psi: f64,
    proj_basis: &DesignMap,
) -> Result<ConditionalMomentSet> {
    let n = data.n();
    let delta = exposure_residuals(system, data, theta)?;
    let h_real: Array1<f64> = &data.y - &(psi * &data.a);

    let basis = proj_basis.evaluate(data)?;
    let b = &basis.values;
    let db = b.ncols();
    if linalg::rank(b, 1e-10) < db {
        return Err(Error::RankDeficient {
            column: "conditional-moment projection basis".into(),
        });
    }
    let btb = b.t().dot(b);
    let fit_one = |target: &Array1<f64>| -> Result<Array1<f64>> {
        let btt = b.t().dot(target);
        let coef = linalg::solve_spd(&btb, &btt)?;
        Ok(b.dot(&coef))
    };

    let d2_real = delta.mapv(|v| v * v);
    let d2h_real = &d2_real * &h_real;
    let d2h2_real = &d2h_real * &h_real;
    let da_real = &delta * &data.a;

    let mut d2 = fit_one(&d2_real)?;
    let d2h = fit_one(&d2h_real)?;
    let mut d2h2 = fit_one(&d2h2_real)?;
    let da = fit_one(&da_real)?;
    let h = fit_one(&h_real)?;

    let d_x = data.dim_x();
    let mut x = Array2::zeros((n, d_x));
    let mut hx = Array2::zeros((n, d_x));
    for j in 0..d_x {
        let xj = data.x.column(j).to_owned();
        x.column_mut(j).assign(&fit_one(&xj)?);
        let hxj = &h_real * &xj;
        hx.column_mut(j).assign(&fit_one(&hxj)?);
    }

    // Projection scores: basis-weighted residuals of every fitted model,
    // stacked column-wise, taken at the raw least-squares fits (mean-zero
    // by orthogonality). Callers accounting for instrument estimation can
    // append them to the moment stack.
    let mut pairs: Vec<(Array1<f64>, Array1<f64>)> = vec![
        (d2_real.clone(), d2.clone()),
        (d2h_real.clone(), d2h.clone()),
        (d2h2_real.clone(), d2h2.clone()),
        (da_real, da.clone()),
        (h_real.clone(), h.clone()),
    ];
    for j in 0..d_x {
        let xj = data.x.column(j).to_owned();
        pairs.push((xj.clone(), x.column(j).to_owned()));
        pairs.push((&h_real * &xj, hx.column(j).to_owned()));
    }
    let mut scores = Array2::zeros((n, db * pairs.len()));
    for (block, (realized, fitted)) in pairs.iter().enumerate() {
        for i in 0..n {
            let resid = realized[i] - fitted[i];
            for s in 0..db {
                scores[[i, block * db + s]] = b[[i, s]] * resid;
            }
        }
    }

    // Floor the variance-like fits.
    let mut floored = 0usize;
    for (fitted, realized) in [(&mut d2, &d2_real), (&mut d2h2, &d2h2_real)] {
        let scale = realized.mapv(f64::abs).mean().unwrap().max(f64::MIN_POSITIVE);
        let floor = 1e-10 * scale;
        let mut hits = 0usize;
        for v in fitted.iter_mut() {
            if *v < floor {
                *v = floor;
                hits += 1;
            }
        }
        if hits == n {
            return Err(Error::InvalidData(
                "conditional variance fit is entirely floored (degenerate)".into(),
            ));
        }
        floored += hits;
    }

    Ok(ConditionalMomentSet {
        source: MomentSource::Regression,
        d2,
        d2h,
        d2h2,
        da,
        h,
        x,
        hx,
        floored,
        projection_scores: Some(scores),
    })
}

/// Optimal instruments evaluated per observation: functions of the
/// error-free covariates only, with dimension `1 + p1 + p2`.
#[derive(Debug, Clone)]
pub struct OptimalInstruments {
    pub ell: Array2<f64>,
    pub m: Array2<f64>,
    /// Rows whose determinant `d(C)` was floored.
    pub floored: usize,
}

/// Builds the optimal instrument pair from conditional moments and the
/// gradient bases of the exposure model (`b1` the baseline basis, `b2` the
/// interaction basis; pass a ones column for no interaction).
pub fn optimal_instruments(
    cm: &ConditionalMomentSet,
    b1: &Array2<f64>,
    b2: &Array2<f64>,
) -> Result<OptimalInstruments> {
    let n = cm.n();
    if b1.nrows() != n || b2.nrows() != n {
        return Err(Error::DimensionMismatch {
            what: "gradient basis rows".into(),
            expected: n,
            found: b1.nrows().min(b2.nrows()),
        });
    }
    let p1 = b1.ncols();
    let m2 = b2.ncols();
    let d_x = cm.dim_x();
    let p2 = d_x * m2;
    let dim = 1 + p1 + p2;

    let d_vals = cm.d_values();
    let scale = d_vals.mapv(f64::abs).mean().unwrap().max(f64::MIN_POSITIVE);
    let floor = 1e-10 * scale;
    let mut floored = 0usize;

    let mut ell = Array2::zeros((n, dim));
    let mut m_out = Array2::zeros((n, dim));
    for i in 0..n {
        let mut d = d_vals[i];
        if d < floor {
            d = floor;
            floored += 1;
        }
        let inv_d = 1.0 / d;
        let (d2, d2h, d2h2) = (cm.d2[i], cm.d2h[i], cm.d2h2[i]);
        // 2x2 solve: l = (d2 * Ev - d2h * Ew) / d; m = (d2h2 * Ew - d2h * Ev) / d.
        let solve = |ev: f64, ew: f64| -> (f64, f64) {
            (
                inv_d * (d2 * ev - d2h * ew),
                inv_d * (d2h2 * ew - d2h * ev),
            )
        };
        // Block 1: V = D A, W = 0.
        let (l, m) = solve(cm.da[i], 0.0);
        ell[[i, 0]] = l;
        m_out[[i, 0]] = m;
        // Block 2: V = H grad(g_a1), W = grad(g_a1).
        for c in 0..p1 {
            let (l, m) = solve(cm.h[i] * b1[[i, c]], b1[[i, c]]);
            ell[[i, 1 + c]] = l;
            m_out[[i, 1 + c]] = m;
        }
        // Block 3: V = H X' grad(g_a2), W = X' grad(g_a2).
        for j in 0..d_x {
            for s in 0..m2 {
                let (l, m) = solve(cm.hx[[i, j]] * b2[[i, s]], cm.x[[i, j]] * b2[[i, s]]);
                ell[[i, 1 + p1 + j * m2 + s]] = l;
                m_out[[i, 1 + p1 + j * m2 + s]] = m;
            }
        }
    }
    if floored == n {
        return Err(Error::InvalidData(
            "determinant d(C) floored on every row (degenerate conditional moments)".into(),
        ));
    }
    Ok(OptimalInstruments {
        ell,
        m: m_out,
        floored,
    })
}
