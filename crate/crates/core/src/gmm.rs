//! GMM estimation and overidentification testing on bound moment systems.
//!
//! The fitting pipeline follows the standard iterative weighting scheme:
//! an identity-weight minimization initializes the parameter, the weight is
//! the uncentered second-moment matrix of the per-observation moments at the
//! current parameter, and the quadratic form is re-minimized until the
//! parameter or objective stabilizes. Two-step stops after the first weight
//! update; continuous updating minimizes the quadratic form with the weight
//! recomputed at every trial parameter. The minimized quadratic form times
//! `n` is the Sargan/J statistic, asymptotically chi-squared with `q`
//! degrees of freedom.

use ndarray::{Array1, Array2};
use serde::Serialize;

use crate::dataset::{structural_shift, Dataset};
use crate::error::{Error, Result};
use crate::linalg::{self, SpdInverse};
use crate::moments::{BoundSystem, MomentSystem, ParamVector};
use crate::optim;
use crate::stats;

/// How the weight matrix is updated during fitting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WeightKind {
    /// Identity-weight initialization followed by one weight update.
    TwoStep,
    /// Alternate minimization and weight updates until convergence.
    Iterated { max_iter: usize, tol: f64 },
    /// Continuous updating: the weight is a function of the trial parameter.
    Cue,
}

/// Long-run covariance estimator for the moment vectors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CovarianceKind {
    /// Uncentered second-moment matrix `(1/n) sum U_i U_i'`.
    Iid,
    /// Newey-West estimator with Bartlett kernel weights; requires the data
    /// to be in time order.
    Hac { bandwidth: Bandwidth },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bandwidth {
    /// `floor(4 (n/100)^{2/9})`.
    Auto,
    Fixed(usize),
}

impl Bandwidth {
    pub fn resolve(self, n: usize) -> usize {
        match self {
            Bandwidth::Auto => (4.0 * (n as f64 / 100.0).powf(2.0 / 9.0)).floor() as usize,
            Bandwidth::Fixed(b) => b,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightingScheme {
    pub kind: WeightKind,
    pub covariance: CovarianceKind,
}

impl WeightingScheme {
    pub fn two_step() -> Self {
        WeightingScheme {
            kind: WeightKind::TwoStep,
            covariance: CovarianceKind::Iid,
        }
    }

    /// Iterated weighting with the default convergence controls.
    pub fn iterated() -> Self {
        WeightingScheme {
            kind: WeightKind::Iterated {
                max_iter: 50,
                tol: 1e-8,
            },
            covariance: CovarianceKind::Iid,
        }
    }

    pub fn cue() -> Self {
        WeightingScheme {
            kind: WeightKind::Cue,
            covariance: CovarianceKind::Iid,
        }
    }

    pub fn with_hac(mut self, bandwidth: Bandwidth) -> Self {
        self.covariance = CovarianceKind::Hac { bandwidth };
        self
    }
}

impl Default for WeightingScheme {
    fn default() -> Self {
        WeightingScheme::iterated()
    }
}

/// Non-fatal diagnostics attached to a fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FitWarning {
    /// The iterated weighting loop hit its iteration cap.
    NotConverged,
    /// The mean moment Jacobian is rank deficient at the optimum, so the
    /// parameter is not locally identified.
    JacobianRankDeficient,
    /// The weight matrix needed a ridge to factor.
    WeightRidged,
}

/// Result of a GMM fit.
#[derive(Debug, Clone)]
pub struct GmmFit {
    pub theta_hat: ParamVector,
    /// `n` times the minimized weighted quadratic form.
    pub j_stat: f64,
    /// Overidentification degree.
    pub df: usize,
    /// Upper-tail chi-squared probability of `j_stat` at `df` degrees of
    /// freedom (1.0 for exactly identified systems).
    pub p_value: f64,
    /// Moment covariance at the optimum.
    pub omega_hat: Array2<f64>,
    /// Weight updates performed.
    pub n_iterations: usize,
    pub converged: bool,
    /// J value after each weight update.
    pub objective_trace: Vec<f64>,
    pub scheme: WeightingScheme,
    pub warnings: Vec<FitWarning>,
}

/// Mean moment vector at `theta`.
pub fn empirical_moments(
    system: &MomentSystem,
    data: &Dataset,
    theta: &ParamVector,
) -> Result<Array1<f64>> {
    system.bind(data)?.mean_moments(theta)
}

/// Uncentered second-moment matrix `(1/n) sum U_i U_i'` of the moments.
pub fn covariance_iid(
    system: &MomentSystem,
    data: &Dataset,
    theta: &ParamVector,
) -> Result<Array2<f64>> {
    let bound = system.bind(data)?;
    let u = bound.moment_matrix(theta)?;
    covariance_iid_from(&u)
}

fn covariance_iid_from(u: &Array2<f64>) -> Result<Array2<f64>> {
    let n = u.nrows();
    let d = u.ncols();
    if n <= d {
        return Err(Error::InvalidData(format!(
            "need more observations ({n}) than moment dimensions ({d})"
        )));
    }
    Ok(u.t().dot(u) / n as f64)
}

/// Newey-West covariance with Bartlett weights
/// `w_l = 1 - l / (L + 1)` and symmetrized lag terms. `bandwidth` 0
/// degenerates to the iid estimator. Assumes rows are in time order.
pub fn covariance_hac(
    system: &MomentSystem,
    data: &Dataset,
    theta: &ParamVector,
    bandwidth: usize,
) -> Result<Array2<f64>> {
    let bound = system.bind(data)?;
    let u = bound.moment_matrix(theta)?;
    covariance_hac_from(&u, bandwidth)
}

fn covariance_hac_from(u: &Array2<f64>, bandwidth: usize) -> Result<Array2<f64>> {
    let n = u.nrows();
    let d = u.ncols();
    if bandwidth >= n {
        return Err(Error::InvalidData(format!(
            "HAC bandwidth {bandwidth} must be smaller than the sample size {n}"
        )));
    }
    let mut omega = covariance_iid_from(u)?;
    for lag in 1..=bandwidth {
        let w = 1.0 - lag as f64 / (bandwidth as f64 + 1.0);
        let mut gamma = Array2::zeros((d, d));
        for t in lag..n {
            for r in 0..d {
                let ur = u[[t, r]];
                for c in 0..d {
                    gamma[[r, c]] += ur * u[[t - lag, c]];
                }
            }
        }
        gamma /= n as f64;
        for r in 0..d {
            for c in 0..d {
                omega[[r, c]] += w * (gamma[[r, c]] + gamma[[c, r]]);
            }
        }
    }
    Ok(omega)
}

fn covariance_at(bound: &BoundSystem, theta: &ParamVector, kind: CovarianceKind) -> Result<Array2<f64>> {
    let u = bound.moment_matrix(theta)?;
    match kind {
        CovarianceKind::Iid => covariance_iid_from(&u),
        CovarianceKind::Hac { bandwidth } => {
            covariance_hac_from(&u, bandwidth.resolve(u.nrows()))
        }
    }
}

/// Upper-tail probability of the chi-squared distribution with `q` degrees
/// of freedom, via the regularized incomplete gamma function. `q = 0`
/// (exactly identified) returns 1.
pub fn chi2_pvalue(stat: f64, q: usize) -> f64 {
    debug_assert!(stat >= -1e-12, "negative test statistic");
    if q == 0 {
        return 1.0;
    }
    let stat = stat.max(0.0);
    if stat == 0.0 {
        return 1.0;
    }
    statrs::function::gamma::gamma_ur(q as f64 / 2.0, stat / 2.0)
}

/// Minimizes the GMM quadratic form under `scheme` and returns the fit.
///
/// The default initialization regresses the exposure on its model design and
/// solves the outcome score exactly; pass `init` to override.
pub fn gmm_minimize(
    system: &MomentSystem,
    data: &Dataset,
    scheme: &WeightingScheme,
    init: Option<&ParamVector>,
) -> Result<GmmFit> {
    let bound = system.bind(data)?;
    gmm_minimize_bound(&bound, scheme, init)
}

/// As [`gmm_minimize`] but reusing an already-bound system.
pub fn gmm_minimize_bound(
    bound: &BoundSystem,
    scheme: &WeightingScheme,
    init: Option<&ParamVector>,
) -> Result<GmmFit> {
    let n = bound.n() as f64;
    let q = bound.q();
    let mut warnings = Vec::new();

    let theta0 = match init {
        Some(t) => t.clone(),
        None => bound.default_init()?,
    };
    let mut flat = theta0.to_flat();

    // Identity-weight initialization.
    let stage0 = minimize_fixed_weight(bound, None, &flat)?;
    flat = stage0.x;
    let mut trace = vec![stage0.objective];
    let mut converged;
    let mut n_iterations = 0usize;
    let mut j_stat = stage0.objective;

    // A parameter zeroing every moment exactly makes the minimized quadratic
    // form zero under any weight; the (singular) covariance never needs
    // inverting.
    if stage0.objective == 0.0 {
        let theta_hat = ParamVector::from_flat(bound.layout(), flat.as_slice().unwrap())?;
        let omega_hat = covariance_at(bound, &theta_hat, scheme.covariance)?;
        return Ok(GmmFit {
            theta_hat,
            j_stat: 0.0,
            df: q,
            p_value: 1.0,
            omega_hat,
            n_iterations: 0,
            converged: true,
            objective_trace: trace,
            scheme: *scheme,
            warnings,
        });
    }

    match scheme.kind {
        WeightKind::TwoStep => {
            let theta = ParamVector::from_flat(bound.layout(), flat.as_slice().unwrap())?;
            let omega = covariance_at(bound, &theta, scheme.covariance)?;
            let weight = SpdInverse::new(&omega)?;
            if weight.was_ridged() {
                warnings.push(FitWarning::WeightRidged);
            }
            let step = minimize_fixed_weight(bound, Some(&weight), &flat)?;
            flat = step.x;
            j_stat = step.objective;
            n_iterations = 1;
            converged = step.converged;
            trace.push(j_stat);
        }
        WeightKind::Iterated { max_iter, tol } => {
            let max_iter = max_iter.max(1);
            converged = false;
            let mut prev_j = f64::INFINITY;
            for _ in 0..max_iter {
                let theta = ParamVector::from_flat(bound.layout(), flat.as_slice().unwrap())?;
                let omega = covariance_at(bound, &theta, scheme.covariance)?;
                let weight = SpdInverse::new(&omega)?;
                if weight.was_ridged() && !warnings.contains(&FitWarning::WeightRidged) {
                    warnings.push(FitWarning::WeightRidged);
                }
                let step = minimize_fixed_weight(bound, Some(&weight), &flat)?;
                n_iterations += 1;
                let max_delta = step
                    .x
                    .iter()
                    .zip(flat.iter())
                    .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
                let scale = 1.0 + flat.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                j_stat = step.objective;
                flat = step.x;
                trace.push(j_stat);
                if max_delta < tol * scale || (prev_j - j_stat).abs() < 1e-10 * (1.0 + j_stat) {
                    converged = true;
                    break;
                }
                prev_j = j_stat;
            }
            if !converged {
                warnings.push(FitWarning::NotConverged);
            }
        }
        WeightKind::Cue => {
            // Warm start: one weight update from the identity-weight point.
            {
                let theta = ParamVector::from_flat(bound.layout(), flat.as_slice().unwrap())?;
                let omega = covariance_at(bound, &theta, scheme.covariance)?;
                let weight = SpdInverse::new(&omega)?;
                let step = minimize_fixed_weight(bound, Some(&weight), &flat)?;
                flat = step.x;
            }
            let layout = bound.layout();
            let cov_kind = scheme.covariance;
            let objective = |x: &Array1<f64>| -> Result<f64> {
                let theta = match ParamVector::from_flat(layout, x.as_slice().unwrap()) {
                    Ok(t) => t,
                    Err(_) => return Ok(f64::MAX / 8.0),
                };
                let mean = match bound.mean_moments(&theta) {
                    Ok(m) => m,
                    Err(_) => return Ok(f64::MAX / 8.0),
                };
                let omega = match covariance_at(bound, &theta, cov_kind) {
                    Ok(o) => o,
                    Err(_) => return Ok(f64::MAX / 8.0),
                };
                match SpdInverse::new(&omega) {
                    Ok(w) => Ok(n * w.quad_form(&mean)),
                    Err(_) => Ok(f64::MAX / 8.0),
                }
            };
            let nm = optim::nelder_mead(&flat, 0.05, objective, 1e-12, 20_000)?;
            n_iterations = nm.n_eval;
            converged = nm.converged;
            j_stat = nm.objective;
            flat = nm.x;
            trace.push(j_stat);
            if !converged {
                warnings.push(FitWarning::NotConverged);
            }
        }
    }

    let theta_hat = ParamVector::from_flat(bound.layout(), flat.as_slice().unwrap())?;
    let omega_hat = covariance_at(bound, &theta_hat, scheme.covariance)?;

    // Local identification: the weighted mean Jacobian must have full
    // column rank at the optimum.
    let jac = bound.mean_jacobian(&theta_hat)?;
    let dim_theta = bound.layout().total();
    if dim_theta > 0 && linalg::rank(&jac, 1e-10) < dim_theta {
        warnings.push(FitWarning::JacobianRankDeficient);
    }

    let p_value = chi2_pvalue(j_stat, q);
    Ok(GmmFit {
        theta_hat,
        j_stat,
        df: q,
        p_value,
        omega_hat,
        n_iterations,
        converged,
        objective_trace: trace,
        scheme: *scheme,
        warnings,
    })
}

/// Minimizes `n * U_bar' W^{-1} U_bar` for a fixed weight (`None` = identity)
/// by Gauss-Newton on the whitened moment means, with a Nelder-Mead rescue
/// when Gauss-Newton stalls.
fn minimize_fixed_weight(
    bound: &BoundSystem,
    weight: Option<&SpdInverse>,
    start: &Array1<f64>,
) -> Result<optim::GaussNewtonResult> {
    let layout = bound.layout();
    let sqrt_n = (bound.n() as f64).sqrt();
    let residual = |x: &Array1<f64>| -> Result<Array1<f64>> {
        let theta = ParamVector::from_flat(layout, x.as_slice().unwrap())?;
        let mean = bound.mean_moments(&theta)?;
        Ok(match weight {
            Some(w) => w.whiten(&mean) * sqrt_n,
            None => mean * sqrt_n,
        })
    };
    let jacobian = |x: &Array1<f64>| -> Result<Array2<f64>> {
        let theta = ParamVector::from_flat(layout, x.as_slice().unwrap())?;
        let jac = bound.mean_jacobian(&theta)?;
        Ok(match weight {
            Some(w) => w.whiten_mat(&jac) * sqrt_n,
            None => jac * sqrt_n,
        })
    };
    let gn = optim::gauss_newton(start, residual, jacobian, 200)?;
    if gn.converged {
        return Ok(gn);
    }
    // Rescue: simplex descent on the same objective from the best point.
    let layout = bound.layout();
    let obj = |x: &Array1<f64>| -> Result<f64> {
        let theta = match ParamVector::from_flat(layout, x.as_slice().unwrap()) {
            Ok(t) => t,
            Err(_) => return Ok(f64::MAX / 8.0),
        };
        let mean = match bound.mean_moments(&theta) {
            Ok(m) => m,
            Err(_) => return Ok(f64::MAX / 8.0),
        };
        Ok(match weight {
            Some(w) => w.quad_form(&mean) * sqrt_n * sqrt_n,
            None => mean.dot(&mean) * sqrt_n * sqrt_n,
        })
    };
    let nm = optim::nelder_mead(&gn.x, 0.1, obj, 1e-12, 10_000)?;
    if nm.objective < gn.objective {
        Ok(optim::GaussNewtonResult {
            x: nm.x,
            objective: nm.objective,
            converged: nm.converged,
            n_iter: gn.n_iter + nm.n_eval,
        })
    } else {
        Ok(gn)
    }
}

/// Plug-in-corrected covariance of the non-score moment blocks after
/// profiling out the outcome score:
/// `(1/n) sum_i [U_i - (sum_j dU_j/dgamma)(sum_j dS_j/dgamma)^{-1} S_i]^{x2}`
/// restricted to the non-score rows. Requires `theta.gamma` to solve the
/// score equations to tolerance 1e-8.
pub fn profiled_variance(
    system: &MomentSystem,
    data: &Dataset,
    theta: &ParamVector,
) -> Result<Array2<f64>> {
    let layout = system.layout();
    let dim_gamma = layout.dim_gamma;
    if dim_gamma == 0 {
        return Err(Error::InvalidConfig(
            "profiled variance requires a moment system with an outcome score block".into(),
        ));
    }
    let bound = system.bind(data)?;
    let n = bound.n();
    let dim_u = bound.dim_u();
    let dim_main = dim_u - dim_gamma;

    let u = bound.moment_matrix(theta)?;
    // The score block occupies the trailing rows of the moment vector.
    let mean = u.mean_axis(ndarray::Axis(0)).unwrap();
    for g in 0..dim_gamma {
        if mean[dim_main + g].abs() > 1e-8 {
            return Err(Error::InvalidData(format!(
                "gamma does not solve the score equations (score mean {:.3e})",
                mean[dim_main + g]
            )));
        }
    }

    let jac = bound.mean_jacobian(theta)?;
    let gamma_cols = layout.p1 + layout.p2()..layout.total();
    // A = mean d(main block)/d(gamma); B = mean d(score)/d(gamma).
    let mut a = Array2::zeros((dim_main, dim_gamma));
    let mut b = Array2::zeros((dim_gamma, dim_gamma));
    for (jc, c) in gamma_cols.enumerate() {
        for r in 0..dim_main {
            a[[r, jc]] = jac[[r, c]];
        }
        for r in 0..dim_gamma {
            b[[r, jc]] = jac[[dim_main + r, c]];
        }
    }
    // C = A B^{-1}, via B' solves on the rows of A.
    let b_na = linalg::to_na(&b);
    let lu = b_na.transpose().lu();
    let mut corr = Array2::zeros((dim_main, dim_gamma));
    for r in 0..dim_main {
        let row = nalgebra::DVector::from_iterator(dim_gamma, (0..dim_gamma).map(|c| a[[r, c]]));
        let solved = lu.solve(&row).ok_or_else(|| Error::SingularMatrix {
            what: "score gradient".into(),
        })?;
        for c in 0..dim_gamma {
            corr[[r, c]] = solved[c];
        }
    }

    let mut omega = Array2::zeros((dim_main, dim_main));
    let mut adj = Array1::zeros(dim_main);
    for i in 0..n {
        for r in 0..dim_main {
            let mut v = u[[i, r]];
            for g in 0..dim_gamma {
                v -= corr[[r, g]] * u[[i, dim_main + g]];
            }
            adj[r] = v;
        }
        for r in 0..dim_main {
            for c in 0..dim_main {
                omega[[r, c]] += adj[r] * adj[c];
            }
        }
    }
    omega /= n as f64;
    Ok(omega)
}

/// Where to look for the structural effect.
#[derive(Debug, Clone)]
pub enum PsiSearch {
    /// Explicit grid of trial effects.
    Grid(Vec<f64>),
    /// Grid centered at zero spanning +/- `half_width_ses` crude-OLS
    /// standard errors of the exposure coefficient, with `points` points.
    Auto { points: usize, half_width_ses: f64 },
}

impl Default for PsiSearch {
    fn default() -> Self {
        PsiSearch::Auto {
            points: 41,
            half_width_ses: 10.0,
        }
    }
}

/// Effect estimate from profile inversion of a robust test.
#[derive(Debug, Clone)]
pub struct EffectEstimate {
    pub psi_hat: f64,
    pub std_err: f64,
    /// Fit of the inner system at the shifted outcome `Y - psi_hat * A`.
    pub fit: GmmFit,
    /// The profiled J statistic over the search grid.
    pub profile: Vec<(f64, f64)>,
}

/// Estimates the additive structural effect by nested profiling: for each
/// trial effect the outcome is shifted and the inner system refitted; the
/// estimate minimizes the profiled J statistic (a root of the extra moment
/// when the stacked system is exactly identified). The standard error comes
/// from the stacked GMM sandwich at the optimum.
pub fn estimate_effect(
    system: &MomentSystem,
    data: &Dataset,
    scheme: &WeightingScheme,
    search: PsiSearch,
) -> Result<EffectEstimate> {
    let grid = match search {
        PsiSearch::Grid(g) => {
            if g.len() < 3 {
                return Err(Error::InvalidConfig(
                    "effect search grid needs at least 3 points".into(),
                ));
            }
            let mut g = g;
            g.sort_by(|a, b| a.partial_cmp(b).unwrap());
            g
        }
        PsiSearch::Auto {
            points,
            half_width_ses,
        } => {
            let se = crude_ols_se(data)?;
            let half = half_width_ses * se;
            let points = points.max(5);
            (0..points)
                .map(|i| -half + 2.0 * half * i as f64 / (points - 1) as f64)
                .collect()
        }
    };

    let mut profile = Vec::with_capacity(grid.len());
    let mut warm: Option<ParamVector> = None;
    for &psi in &grid {
        let fit = fit_at_psi(system, data, scheme, psi, warm.as_ref())?;
        warm = Some(fit.theta_hat.clone());
        profile.push((psi, fit.j_stat));
    }

    let (best_idx, _) = profile
        .iter()
        .enumerate()
        .min_by(|a, b| a.1 .1.partial_cmp(&b.1 .1).unwrap())
        .unwrap();
    if best_idx == 0 || best_idx == grid.len() - 1 {
        return Err(Error::Unidentified(
            "profiled objective has no interior minimum: unidentified at this resolution".into(),
        ));
    }

    // Refine within the bracketing interval.
    let warm_theta = warm.clone();
    let (psi_hat, _) = optim::golden_section(
        |psi| {
            fit_at_psi(system, data, scheme, psi, warm_theta.as_ref()).map(|fit| fit.j_stat)
        },
        grid[best_idx - 1],
        grid[best_idx + 1],
        1e-7,
        120,
    )?;

    let mut fit = fit_at_psi(system, data, scheme, psi_hat, warm.as_ref())?;
    fit.theta_hat.psi = Some(psi_hat);

    let std_err = stacked_sandwich_se(system, data, psi_hat, &fit)?;
    Ok(EffectEstimate {
        psi_hat,
        std_err,
        fit,
        profile,
    })
}

fn fit_at_psi(
    system: &MomentSystem,
    data: &Dataset,
    scheme: &WeightingScheme,
    psi: f64,
    warm: Option<&ParamVector>,
) -> Result<GmmFit> {
    let shifted = structural_shift(data, psi)?;
    gmm_minimize(system, &shifted, scheme, warm)
}

/// HC0 standard error of the exposure coefficient in the crude regression of
/// the outcome on an intercept, the covariates, and the exposure.
fn crude_ols_se(data: &Dataset) -> Result<f64> {
    let n = data.n();
    let k = 1 + data.dim_c() + data.dim_x() + 1;
    let mut design = Array2::zeros((n, k));
    for i in 0..n {
        design[[i, 0]] = 1.0;
        for j in 0..data.dim_c() {
            design[[i, 1 + j]] = data.c[[i, j]];
        }
        for j in 0..data.dim_x() {
            design[[i, 1 + data.dim_c() + j]] = data.x[[i, j]];
        }
        design[[i, k - 1]] = data.a[i];
    }
    let fit = stats::ols_hc0(&data.y, &design)?;
    let se = fit.hc0_cov[[k - 1, k - 1]].max(0.0).sqrt();
    if se <= 0.0 || !se.is_finite() {
        return Err(Error::InvalidData(
            "crude OLS standard error is degenerate; supply an explicit grid".into(),
        ));
    }
    Ok(se)
}

/// Sandwich standard error of `psi` in the stacked system with parameter
/// `(psi, theta)`: `V = (G' Omega^{-1} G)^{-1} / n`, with the `psi` column
/// of `G` by central differences through the outcome shift.
fn stacked_sandwich_se(
    system: &MomentSystem,
    data: &Dataset,
    psi_hat: f64,
    fit: &GmmFit,
) -> Result<f64> {
    let shifted = structural_shift(data, psi_hat)?;
    let bound = system.bind(&shifted)?;
    let theta = &fit.theta_hat;
    let jac_theta = bound.mean_jacobian(theta)?;
    let dim_u = bound.dim_u();
    let dim_theta = bound.layout().total();

    let h = 1e-5 * (1.0 + psi_hat.abs());
    let up = system
        .bind(&structural_shift(data, psi_hat + h)?)?
        .mean_moments(theta)?;
    let dn = system
        .bind(&structural_shift(data, psi_hat - h)?)?
        .mean_moments(theta)?;

    let mut g = Array2::zeros((dim_u, 1 + dim_theta));
    for r in 0..dim_u {
        g[[r, 0]] = (up[r] - dn[r]) / (2.0 * h);
        for c in 0..dim_theta {
            g[[r, 1 + c]] = jac_theta[[r, c]];
        }
    }

    let weight = SpdInverse::new(&fit.omega_hat)?;
    let wg = weight.solve_mat(&g);
    let gwg = g.t().dot(&wg);
    let chol = linalg::to_na(&gwg)
        .cholesky()
        .ok_or_else(|| Error::SingularMatrix {
            what: "stacked sandwich information".into(),
        })?;
    let inv = chol.inverse();
    let v = inv[(0, 0)] / data.n() as f64;
    Ok(v.max(0.0).sqrt())
}
