//! Measurement-error-robust tests of no treatment effect.
//!
//! This crate implements a family of semiparametric GMM (Sargan) tests that
//! stay valid when a subset of continuous confounders is measured with
//! classical error, requiring no validation data, replicates, or knowledge
//! of the error distribution. Under the null of no effect the outcome acts
//! as an instrument for the association between the latent confounder and
//! the exposure, which turns exposure-model estimation plus effect testing
//! into one overidentified moment system.
//!
//! Three test families are provided, together with binary- and
//! count-exposure extensions:
//!
//! - robust propensity-score (`rps`): valid when the exposure mean model is
//!   correct;
//! - robust outcome-regression (`ror`): valid when the outcome mean model is
//!   correct;
//! - doubly robust (`dr`): valid when either model is correct.
//!
//! On top of the moment systems sit a GMM layer (two-step, iterated, and
//! continuous-updating weighting; iid and Newey-West covariance; profiled
//! variance; effect estimation under an additive structural model), optimal
//! instrument construction from plug-in conditional moments, and a Monte
//! Carlo lab that reproduces the validity and power experiments at desk
//! scale.

pub mod basis;
pub mod dataset;
pub mod error;
pub mod gmm;
pub mod linalg;
pub mod moments;
pub mod optimal;
pub mod simlab;
pub mod stats;

mod optim;

pub use basis::{evaluate_basis, gram_schmidt_orthonormalize, BasisKind, BasisSpec, DesignMap, DesignMatrix};
pub use dataset::{structural_shift, Dataset, ExposureKind};
pub use error::{Error, Result};
pub use gmm::{
    chi2_pvalue, covariance_hac, covariance_iid, empirical_moments, estimate_effect,
    gmm_minimize, profiled_variance, Bandwidth, CovarianceKind, EffectEstimate, FitWarning,
    GmmFit, PsiSearch, WeightKind, WeightingScheme,
};
pub use moments::{
    build_moments, exposure_residuals, outcome_residuals, BoundSystem, Instruments, MomentKind,
    MomentSystem, OutcomeLink, OutcomeModel, ParamLayout, ParamVector,
};
pub use optimal::{
    fit_conditional_moments, optimal_instruments, ConditionalMomentSet, MomentSource,
    OptimalInstruments,
};
pub use simlab::{
    comparison_gest, comparison_standard_or, power_curve, run_monte_carlo, Regime, SimCell,
    SimConfig, SimDraw, SimReport, TestKind,
};
