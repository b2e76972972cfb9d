//! Monte Carlo lab: the reference data-generating process, the comparison
//! tests that ignore measurement error, and the rejection-rate experiment
//! drivers.
//!
//! The generating mechanism draws, per observation,
//!
//! ```text
//! Y0 ~ N(0,1)           C  = Y0 + N(0,1)
//! X* = Y0 + C + Y0 C + N(0,1)
//! A  = C + X* + N(0,4)  X  = X* + N(0, 9 (1/tau - 1))
//! Y  = Y0 + psi0 A
//! ```
//!
//! with `tau` the reliability ratio `Var(X*)/Var(X)` (here `Var(X*) = 9`)
//! and `N(0, v)` read as variance `v`. `tau = 1` sets the measurement-error
//! variance to exactly zero; `psi0 = 0` is the null. Latent draws are
//! returned in a side channel for harness diagnostics only.
//!
//! Model-specification regimes wire the analysis models: correct
//! specifications use `g_y = [1, C] gamma` and `g_a1 = [1, C] alpha1`;
//! misspecified ones replace `C` with `C^2`. The outcome score basis always
//! matches the configured outcome model.

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{BasisSpec, DesignMap};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::gmm::{gmm_minimize, WeightingScheme};
use crate::moments::{Instruments, MomentSystem, OutcomeModel};
use crate::optimal::{ConditionalMomentSet, MomentSource};
use crate::stats;

/// Which analysis models are correctly specified.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Both the exposure and outcome models are correct.
    BothCorrect,
    /// Only the outcome model is correct; `g_a1` uses the squared covariate.
    OutcomeCorrect,
    /// Only the exposure model is correct; `g_y` uses the squared covariate.
    ExposureCorrect,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::BothCorrect => "both_correct",
            Regime::OutcomeCorrect => "outcome_correct",
            Regime::ExposureCorrect => "exposure_correct",
        }
    }

    fn exposure_model_correct(self) -> bool {
        !matches!(self, Regime::OutcomeCorrect)
    }

    fn outcome_model_correct(self) -> bool {
        !matches!(self, Regime::ExposureCorrect)
    }
}

/// Tests the lab can run per replicate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestKind {
    /// Robust propensity-score Sargan test.
    Rps,
    /// Robust outcome-regression Sargan test.
    Ror,
    /// Doubly-robust Sargan test.
    Dr,
    /// Baseline: exposure-on-outcome regression coefficient test.
    GEstimation,
    /// Baseline: OLS outcome regression coefficient test with HC0 variance.
    StandardOr,
}

impl TestKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TestKind::Rps => "rps",
            TestKind::Ror => "ror",
            TestKind::Dr => "dr",
            TestKind::GEstimation => "gest",
            TestKind::StandardOr => "standard_or",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "rps" => Ok(TestKind::Rps),
            "ror" => Ok(TestKind::Ror),
            "dr" => Ok(TestKind::Dr),
            "gest" | "g_estimation" => Ok(TestKind::GEstimation),
            "standard_or" => Ok(TestKind::StandardOr),
            other => Err(Error::InvalidConfig(format!("unknown test '{other}'"))),
        }
    }
}

/// One Monte Carlo experiment cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimConfig {
    pub n: usize,
    /// Reliability ratio in (0, 1].
    pub tau: f64,
    /// Structural effect used to generate the outcome (0 = null).
    pub psi0: f64,
    pub regime: Regime,
    pub n_reps: usize,
    pub seed: u64,
    pub tests: Vec<TestKind>,
    pub alpha_level: f64,
}

impl SimConfig {
    fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "reliability ratio must be in (0, 1], got {}",
                self.tau
            )));
        }
        if self.n_reps == 0 {
            return Err(Error::InvalidConfig("n_reps must be at least 1".into()));
        }
        if self.n < 10 {
            return Err(Error::InvalidConfig("sample size too small".into()));
        }
        if !(self.alpha_level > 0.0 && self.alpha_level < 1.0) {
            return Err(Error::InvalidConfig("alpha level must be in (0, 1)".into()));
        }
        if self.tests.is_empty() {
            return Err(Error::InvalidConfig("no tests configured".into()));
        }
        Ok(())
    }
}

/// Latent draws exposed to the test harness only.
#[derive(Debug, Clone)]
pub struct Latents {
    pub y0: Array1<f64>,
    pub x_star: Array1<f64>,
    pub eps_star: Array1<f64>,
}

/// A generated dataset plus its latent side channel.
#[derive(Debug, Clone)]
pub struct SimDraw {
    pub data: Dataset,
    pub latents: Latents,
}

/// Draws one replicate. Deterministic in `(config.seed, replicate)`: each
/// replicate takes its own counter-derived stream, so results do not depend
/// on scheduling.
pub fn generate(config: &SimConfig, replicate: u64) -> SimDraw {
    let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
    rng.set_stream(replicate);
    let n = config.n;
    let mut normal = |sd: f64| -> f64 {
        let z: f64 = StandardNormal.sample(&mut rng);
        sd * z
    };

    let mut y0 = Array1::zeros(n);
    let mut c = Array1::zeros(n);
    let mut x_star = Array1::zeros(n);
    let mut a = Array1::zeros(n);
    let mut eps_star = Array1::zeros(n);
    // Measurement error scale: 9 (1/tau - 1); exactly zero at tau = 1.
    let sigma_eps = (9.0 * (1.0 / config.tau - 1.0)).max(0.0).sqrt();
    for i in 0..n {
        y0[i] = normal(1.0);
        c[i] = y0[i] + normal(1.0);
        x_star[i] = y0[i] + c[i] + y0[i] * c[i] + normal(1.0);
        a[i] = c[i] + x_star[i] + normal(2.0);
        eps_star[i] = normal(sigma_eps);
    }
    let x = &x_star + &eps_star;
    let y = &y0 + &(config.psi0 * &a);

    let data = Dataset {
        y,
        a,
        c: Array2::from_shape_fn((n, 1), |(i, _)| c[i]),
        x: Array2::from_shape_fn((n, 1), |(i, _)| x[i]),
    };
    SimDraw {
        data,
        latents: Latents {
            y0,
            x_star,
            eps_star,
        },
    }
}

fn linear_c() -> DesignMap {
    DesignMap::new(vec![BasisSpec::polynomial(0, 1, true)])
}

fn squared_c() -> DesignMap {
    DesignMap::new(vec![BasisSpec::custom("c0^2", true)])
}

fn constant() -> DesignMap {
    DesignMap::new(vec![BasisSpec::constant()])
}

fn cubic_orthonormal() -> Vec<BasisSpec> {
    vec![BasisSpec::polynomial(0, 3, true)]
}

/// Exposure baseline basis under a regime.
pub fn exposure_baseline(regime: Regime) -> DesignMap {
    if regime.exposure_model_correct() {
        linear_c()
    } else {
        squared_c()
    }
}

/// Outcome model basis under a regime.
pub fn outcome_basis(regime: Regime) -> DesignMap {
    if regime.outcome_model_correct() {
        linear_c()
    } else {
        squared_c()
    }
}

/// Builds the robust moment system a regime prescribes for `test`.
///
/// Instrument wiring: the doubly-robust test splits the orthonormalized
/// cubic basis, `k` and `m` taking the first two functions and `ell` the
/// last two; the propensity-score test uses the whole orthonormalized cubic
/// basis as `ell` with `m = 0` and `q = 1`; the outcome-regression test uses
/// `k = [1, C]`.
pub fn robust_system(test: TestKind, regime: Regime) -> Result<MomentSystem> {
    let g_a1 = exposure_baseline(regime);
    let g_y = outcome_basis(regime);
    match test {
        TestKind::Rps => MomentSystem::rps(
            g_a1,
            constant(),
            Instruments::Map(DesignMap::orthonormalized(cubic_orthonormal())),
            Instruments::Zero(4),
            1,
        ),
        TestKind::Ror => MomentSystem::ror(
            constant(),
            OutcomeModel::identity(g_y),
            None,
            Instruments::Map(linear_c()),
            1,
        ),
        TestKind::Dr => {
            let first_two =
                DesignMap::orthonormalized(cubic_orthonormal()).with_columns(vec![0, 1]);
            let last_two =
                DesignMap::orthonormalized(cubic_orthonormal()).with_columns(vec![2, 3]);
            MomentSystem::dr(
                g_a1,
                constant(),
                OutcomeModel::identity(g_y),
                None,
                Instruments::Map(last_two),
                Instruments::Map(first_two.clone()),
                Instruments::Map(first_two),
                1,
            )
        }
        TestKind::GEstimation | TestKind::StandardOr => Err(Error::InvalidConfig(
            "baseline tests are regression-based, not moment systems".into(),
        )),
    }
}

/// Baseline outcome-regression test ignoring measurement error: two-sided
/// HC0 Wald p-value of the exposure coefficient in OLS of the outcome on an
/// intercept, the error-free covariates, the observed error-prone
/// covariates, and the exposure.
pub fn comparison_standard_or(data: &Dataset) -> Result<f64> {
    let n = data.n();
    let k = 1 + data.dim_c() + data.dim_x() + 1;
    if n <= k {
        return Err(Error::InvalidData(
            "not enough observations for the baseline regression".into(),
        ));
    }
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
    Ok(stats::wald_pvalue(&fit, k - 1))
}

/// Baseline g-estimation-style test: two-sided HC0 Wald p-value of the
/// outcome coefficient when regressing the exposure on the configured
/// exposure baseline basis, the observed error-prone covariates, and the
/// outcome.
pub fn comparison_gest(data: &Dataset, exposure_basis: &DesignMap) -> Result<f64> {
    let b1 = exposure_basis.evaluate(data)?.values;
    let n = data.n();
    let k = b1.ncols() + data.dim_x() + 1;
    if n <= k {
        return Err(Error::InvalidData(
            "not enough observations for the baseline regression".into(),
        ));
    }
    let mut design = Array2::zeros((n, k));
    for i in 0..n {
        for j in 0..b1.ncols() {
            design[[i, j]] = b1[[i, j]];
        }
        for j in 0..data.dim_x() {
            design[[i, b1.ncols() + j]] = data.x[[i, j]];
        }
        design[[i, k - 1]] = data.y[i];
    }
    let fit = stats::ols_hc0(&data.a, &design)?;
    Ok(stats::wald_pvalue(&fit, k - 1))
}

/// One row of a rejection-rate report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimCell {
    pub regime: Regime,
    pub tau: f64,
    pub psi0: f64,
    pub test: TestKind,
    pub n: usize,
    pub n_reps: usize,
    /// Replicates that produced a p-value.
    pub n_effective: usize,
    pub rejections: usize,
    pub rejection_rate: f64,
    /// Binomial Monte Carlo standard error `sqrt(r (1-r) / n_effective)`.
    pub monte_carlo_se: f64,
}

/// Rejection-rate grid over experiment cells.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct SimReport {
    pub rows: Vec<SimCell>,
}

impl SimReport {
    pub fn merge(&mut self, other: SimReport) {
        self.rows.extend(other.rows);
    }

    pub fn cell(&self, regime: Regime, tau: f64, test: TestKind, psi0: f64) -> Option<&SimCell> {
        self.rows.iter().find(|r| {
            r.regime == regime && r.test == test && (r.tau - tau).abs() < 1e-12
                && (r.psi0 - psi0).abs() < 1e-12
        })
    }

    /// Stable CSV rendering (no timestamps; shortest-round-trip floats).
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from(
            "regime,tau,psi0,test,n,n_reps,n_effective,rejections,rejection_rate,monte_carlo_se\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                r.regime.as_str(),
                r.tau,
                r.psi0,
                r.test.as_str(),
                r.n,
                r.n_reps,
                r.n_effective,
                r.rejections,
                r.rejection_rate,
                r.monte_carlo_se
            ));
        }
        out
    }
}

/// Runs every configured test on each replicate dataset and aggregates
/// rejection rates at the configured level. Replicate failures are excluded
/// from the effective count; more than 1% of them aborts the run.
pub fn run_monte_carlo(config: &SimConfig) -> Result<SimReport> {
    config.validate()?;
    let scheme = WeightingScheme::iterated();

    // Pre-build the moment systems once; binding re-evaluates bases per
    // replicate dataset.
    let mut systems = Vec::new();
    for &test in &config.tests {
        let sys = match test {
            TestKind::Rps | TestKind::Ror | TestKind::Dr => {
                Some(robust_system(test, config.regime)?)
            }
            _ => None,
        };
        systems.push((test, sys));
    }
    let gest_basis = exposure_baseline(config.regime);

    let results: Vec<std::result::Result<Vec<f64>, Error>> = (0..config.n_reps as u64)
        .into_par_iter()
        .map(|rep| {
            let draw = generate(config, rep);
            let mut pvals = Vec::with_capacity(systems.len());
            for (test, sys) in &systems {
                let p = match test {
                    TestKind::Rps | TestKind::Ror | TestKind::Dr => {
                        gmm_minimize(sys.as_ref().unwrap(), &draw.data, &scheme, None)?.p_value
                    }
                    TestKind::GEstimation => comparison_gest(&draw.data, &gest_basis)?,
                    TestKind::StandardOr => comparison_standard_or(&draw.data)?,
                };
                pvals.push(p);
            }
            Ok(pvals)
        })
        .collect();

    let failed = results.iter().filter(|r| r.is_err()).count();
    if failed * 100 > config.n_reps {
        let first = results
            .iter()
            .find_map(|r| r.as_ref().err())
            .map(|e| e.to_string())
            .unwrap_or_default();
        return Err(Error::ReplicateFailures {
            failed,
            total: config.n_reps,
            first,
        });
    }

    let n_effective = config.n_reps - failed;
    let mut rows = Vec::with_capacity(systems.len());
    for (idx, &test) in config.tests.iter().enumerate() {
        let rejections = results
            .iter()
            .filter_map(|r| r.as_ref().ok())
            .filter(|pvals| pvals[idx] < config.alpha_level)
            .count();
        let rate = if n_effective > 0 {
            rejections as f64 / n_effective as f64
        } else {
            f64::NAN
        };
        let se = if n_effective > 0 {
            (rate * (1.0 - rate) / n_effective as f64).sqrt()
        } else {
            f64::NAN
        };
        rows.push(SimCell {
            regime: config.regime,
            tau: config.tau,
            psi0: config.psi0,
            test,
            n: config.n,
            n_reps: config.n_reps,
            n_effective,
            rejections,
            rejection_rate: rate,
            monte_carlo_se: se,
        });
    }
    Ok(SimReport { rows })
}

/// Rejection rates along a grid of structural effects (the power curve):
/// one Monte Carlo run per grid value with the outcome generated under that
/// effect.
pub fn power_curve(config: &SimConfig, psi_grid: &[f64]) -> Result<SimReport> {
    let mut report = SimReport::default();
    for &psi in psi_grid {
        let cell = SimConfig {
            psi0: psi,
            ..config.clone()
        };
        report.merge(run_monte_carlo(&cell)?);
    }
    Ok(report)
}

/// Analytic conditional moments of the generating process at the true
/// parameters, as functions of the covariate only: the exposure residual at
/// the truth is independent noise with variance `4 + 9(1/tau - 1)`, and the
/// shifted outcome at the true effect equals the latent outcome.
pub fn dgp_conditional_moments(data: &Dataset, tau: f64) -> Result<ConditionalMomentSet> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "reliability ratio must be in (0, 1], got {tau}"
        )));
    }
    let n = data.n();
    let v = 4.0 + 9.0 * (1.0 / tau - 1.0);
    let mut d2 = Array1::zeros(n);
    let mut d2h = Array1::zeros(n);
    let mut d2h2 = Array1::zeros(n);
    let mut da = Array1::zeros(n);
    let mut h = Array1::zeros(n);
    let mut x = Array2::zeros((n, 1));
    let mut hx = Array2::zeros((n, 1));
    for i in 0..n {
        let c = data.c[[i, 0]];
        // E(Y0 | C) = C/2, Var(Y0 | C) = 1/2 under the joint normal draw.
        let ey0 = c / 2.0;
        let ey0sq = 0.5 + c * c / 4.0;
        d2[i] = v;
        d2h[i] = v * ey0;
        d2h2[i] = v * ey0sq;
        da[i] = 4.0;
        h[i] = ey0;
        x[[i, 0]] = 1.5 * c + 0.5 * c * c;
        hx[[i, 0]] = ey0sq * (1.0 + c) + c * c / 2.0;
    }
    ConditionalMomentSet::from_parts(MomentSource::Analytic, d2, d2h, d2h2, da, h, x, hx)
}

/// Convenience wrapper for uniform p-value draws used in calibration tests.
pub fn pvalue_sample(
    config: &SimConfig,
    test: TestKind,
) -> Result<Vec<f64>> {
    config.validate()?;
    let sys = robust_system(test, config.regime)?;
    let scheme = WeightingScheme::iterated();
    let results: Vec<std::result::Result<f64, Error>> = (0..config.n_reps as u64)
        .into_par_iter()
        .map(|rep| {
            let draw = generate(config, rep);
            Ok(gmm_minimize(&sys, &draw.data, &scheme, None)?.p_value)
        })
        .collect();
    let failed = results.iter().filter(|r| r.is_err()).count();
    if failed * 100 > config.n_reps {
        let first = results
            .iter()
            .find_map(|r| r.as_ref().err())
            .map(|e| e.to_string())
            .unwrap_or_default();
        return Err(Error::ReplicateFailures {
            failed,
            total: config.n_reps,
            first,
        });
    }
    Ok(results.into_iter().filter_map(|r| r.ok()).collect())
}
