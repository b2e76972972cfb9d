//! Turns a parsed configuration plus loaded data into bound moment systems:
//! the main test system, the automatic instrument choices, and the
//! goodness-of-fit systems.

use ndarray::Array2;

use merit_core::{
    evaluate_basis, BasisSpec, Dataset, DesignMap, Error, ExposureKind, Instruments,
    MomentSystem, OutcomeModel, Result,
};

use crate::config::{
    resolve_terms, ConfigFile, InstrumentMode, ModelConfig, RobustTestKind, TestConfig,
};
use crate::data::LoadedData;

pub struct ResolvedModel {
    pub g_a1: Option<DesignMap>,
    pub g_a2: DesignMap,
    pub outcome: Option<OutcomeModel>,
    pub score: Option<DesignMap>,
}

pub fn resolve_model(model: &ModelConfig, c_names: &[String]) -> Result<ResolvedModel> {
    let g_a1 = if model.g_a1.is_empty() {
        None
    } else {
        Some(resolve_terms(&model.g_a1, c_names)?)
    };
    let g_a2 = if model.g_a2.is_empty() {
        DesignMap::new(vec![BasisSpec::constant()])
    } else {
        resolve_terms(&model.g_a2, c_names)?
    };
    let outcome = if model.g_y.is_empty() {
        None
    } else {
        Some(OutcomeModel {
            map: resolve_terms(&model.g_y, c_names)?,
            link: model.outcome_link,
        })
    };
    let score = if model.score.is_empty() {
        None
    } else {
        Some(resolve_terms(&model.score, c_names)?)
    };
    Ok(ResolvedModel {
        g_a1,
        g_a2,
        outcome,
        score,
    })
}

fn require_g_a1(model: &ResolvedModel) -> Result<DesignMap> {
    model.g_a1.clone().ok_or_else(|| {
        Error::InvalidConfig("this test needs a [model] g_a1 basis".into())
    })
}

fn require_outcome(model: &ResolvedModel) -> Result<OutcomeModel> {
    model.outcome.clone().ok_or_else(|| {
        Error::InvalidConfig("this test needs a [model] g_y basis".into())
    })
}

fn is_constant_map(map: &DesignMap) -> bool {
    map.dim() == 1
        && map.terms.len() == 1
        && map.terms[0].include_intercept
        && matches!(
            map.terms[0].kind,
            merit_core::BasisKind::Polynomial { degree: 0, .. }
        )
}

/// The time column values used by the auto instruments: the configured time
/// column, or the first error-free covariate.
fn time_values(loaded: &LoadedData) -> Vec<f64> {
    let idx = loaded.time_index.unwrap_or(0);
    loaded.dataset.c.column(idx).to_vec()
}

/// Largest polynomial degree the baseline basis applies to the time column.
fn max_time_poly_degree(map: &DesignMap, time_index: usize) -> usize {
    map.terms
        .iter()
        .filter_map(|t| match t.kind {
            merit_core::BasisKind::Polynomial { column, degree } if column == time_index => {
                Some(degree)
            }
            _ => None,
        })
        .max()
        .unwrap_or(0)
}

/// Builds the configured moment system, resolving automatic instruments.
///
/// Auto mode mirrors the reference data-analysis choices, all with q = 1:
/// the propensity-score test uses `ell = [1, t, 0...]` and
/// `m = [0, 0, g_a1-gradient..., 0...]`; the outcome-regression test uses
/// `k = [1, t^r, ...]` with `r` the smallest polynomial order not in the
/// exposure baseline; the doubly-robust test uses `k = [1, t, ...]`,
/// `m` the exposure-baseline gradient, and `ell = 0`.
pub fn build_test_system(
    config: &ConfigFile,
    test: &TestConfig,
    loaded: &LoadedData,
) -> Result<MomentSystem> {
    let data_cfg = config
        .data
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("missing [data] section".into()))?;
    let model_cfg = config
        .model
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("missing [model] section".into()))?;
    let model = resolve_model(model_cfg, &loaded.c_names)?;
    let instruments = config.instruments.clone().unwrap_or_default();
    let exposure_kind = data_cfg.exposure_kind;
    let d_x = loaded.dataset.dim_x();
    let n = loaded.dataset.n();

    if exposure_kind != ExposureKind::Continuous && !is_constant_map(&model.g_a2) {
        return Err(Error::InvalidConfig(
            "binary and count exposure models do not support covariate interactions in g_a2"
                .into(),
        ));
    }

    let explicit = instruments.mode == InstrumentMode::Explicit;
    let resolve = |spec: &Option<crate::config::InstrumentSpecConfig>, name: &str| {
        spec.as_ref()
            .ok_or_else(|| {
                Error::InvalidConfig(format!("explicit instrument mode needs [instruments.{name}]"))
            })
            .and_then(|s| s.resolve(&loaded.c_names))
    };

    let system = match (test.kind, exposure_kind) {
        (RobustTestKind::Rps, kind) => {
            let g_a1 = require_g_a1(&model)?;
            let (ell, m) = if explicit {
                (resolve(&instruments.ell, "ell")?, resolve(&instruments.m, "m")?)
            } else {
                let p1 = g_a1.dim();
                let p2 = if kind == ExposureKind::Continuous {
                    d_x * model.g_a2.dim()
                } else {
                    d_x
                };
                let dim = p1 + p2 + 1;
                if dim < 2 + p1 {
                    return Err(Error::InvalidConfig(
                        "auto instruments need p2 >= 1; configure instruments explicitly".into(),
                    ));
                }
                let t = time_values(loaded);
                let b1 = g_a1.evaluate(&loaded.dataset)?.values;
                let mut ell = Array2::zeros((n, dim));
                let mut m = Array2::zeros((n, dim));
                for i in 0..n {
                    ell[[i, 0]] = 1.0;
                    ell[[i, 1]] = t[i];
                    for c in 0..p1 {
                        m[[i, 2 + c]] = b1[[i, c]];
                    }
                }
                (Instruments::Matrix(ell), Instruments::Matrix(m))
            };
            match kind {
                ExposureKind::Continuous => {
                    MomentSystem::rps(g_a1, model.g_a2.clone(), ell, m, d_x)?
                }
                ExposureKind::Binary => MomentSystem::rps_binary(g_a1, ell, m, d_x)?,
                ExposureKind::Count => MomentSystem::rps_count(g_a1, ell, m, d_x)?,
            }
        }
        (RobustTestKind::Ror, ExposureKind::Continuous)
        | (RobustTestKind::Ror, ExposureKind::Count) => {
            let outcome = require_outcome(&model)?;
            let k = if explicit {
                resolve(&instruments.k, "k")?
            } else {
                let p2 = if exposure_kind == ExposureKind::Continuous {
                    d_x * model.g_a2.dim()
                } else {
                    d_x
                };
                let r = model
                    .g_a1
                    .as_ref()
                    .map(|m1| max_time_poly_degree(m1, loaded.time_index.unwrap_or(0)) + 1)
                    .unwrap_or(1);
                let t = time_values(loaded);
                let mut k = Array2::zeros((n, p2 + 1));
                for i in 0..n {
                    k[[i, 0]] = 1.0;
                    let mut pow = t[i].powi(r as i32 - 1);
                    for c in 1..p2 + 1 {
                        pow *= t[i];
                        k[[i, c]] = pow;
                    }
                }
                Instruments::Matrix(k)
            };
            if exposure_kind == ExposureKind::Continuous {
                MomentSystem::ror(model.g_a2.clone(), outcome, model.score.clone(), k, d_x)?
            } else {
                MomentSystem::ror_count(outcome, model.score.clone(), k, d_x)?
            }
        }
        (RobustTestKind::Dr, ExposureKind::Continuous)
        | (RobustTestKind::Dr, ExposureKind::Count) => {
            let g_a1 = require_g_a1(&model)?;
            let outcome = require_outcome(&model)?;
            let (ell, m, k) = if explicit {
                (
                    resolve(&instruments.ell, "ell")?,
                    resolve(&instruments.m, "m")?,
                    resolve(&instruments.k, "k")?,
                )
            } else {
                let p1 = g_a1.dim();
                let p2 = if exposure_kind == ExposureKind::Continuous {
                    d_x * model.g_a2.dim()
                } else {
                    d_x
                };
                let t = time_values(loaded);
                let b1 = g_a1.evaluate(&loaded.dataset)?.values;
                let mut k = Array2::zeros((n, p2 + 1));
                for i in 0..n {
                    k[[i, 0]] = 1.0;
                    let mut pow = 1.0;
                    for c in 1..p2 + 1 {
                        pow *= t[i];
                        k[[i, c]] = pow;
                    }
                }
                (
                    Instruments::Zero(p1),
                    Instruments::Matrix(b1),
                    Instruments::Matrix(k),
                )
            };
            if exposure_kind == ExposureKind::Continuous {
                MomentSystem::dr(
                    g_a1,
                    model.g_a2.clone(),
                    outcome,
                    model.score.clone(),
                    ell,
                    m,
                    k,
                    d_x,
                )?
            } else {
                MomentSystem::dr_count(g_a1, outcome, model.score.clone(), ell, m, k, d_x)?
            }
        }
        (RobustTestKind::Ror, ExposureKind::Binary)
        | (RobustTestKind::Dr, ExposureKind::Binary) => return Err(Error::BinaryUnsupported),
    };
    Ok(system)
}

/// Checks that a system is usable as a Sargan test.
pub fn require_overidentified(system: &MomentSystem) -> Result<()> {
    if system.q() < 1 {
        return Err(Error::Unidentified(
            "test requires overidentification q >= 1".into(),
        ));
    }
    Ok(())
}

/// Two extra basis functions continuing the family of the last polynomial
/// or Fourier term of `map`, evaluated over the data.
fn augmentation_columns(map: &DesignMap, data: &Dataset) -> Result<Array2<f64>> {
    let term = map
        .terms
        .iter()
        .rev()
        .find(|t| {
            matches!(
                t.kind,
                merit_core::BasisKind::Polynomial { .. } | merit_core::BasisKind::Fourier { .. }
            )
        })
        .ok_or_else(|| {
            Error::InvalidConfig(
                "goodness-of-fit augmentation needs a polynomial or fourier term in the basis"
                    .into(),
            )
        })?;
    let n = data.n();
    let mut out = Array2::zeros((n, 2));
    match term.kind {
        merit_core::BasisKind::Polynomial { column, degree } => {
            for (j, extra) in [degree + 1, degree + 2].into_iter().enumerate() {
                let spec = BasisSpec::custom(&format!("c{column}^{extra}"), false);
                let col = evaluate_basis(&spec, data)?;
                out.column_mut(j).assign(&col.values.column(0));
            }
        }
        merit_core::BasisKind::Fourier {
            column,
            period,
            n_harmonics,
        } => {
            let spec = BasisSpec::fourier(column, period, n_harmonics + 1, false);
            let eval = evaluate_basis(&spec, data)?;
            let d = eval.values.ncols();
            out.column_mut(0).assign(&eval.values.column(d - 2));
            out.column_mut(1).assign(&eval.values.column(d - 1));
        }
        _ => unreachable!(),
    }
    Ok(out)
}

/// Exposure-model goodness-of-fit system: the propensity-score moments with
/// `ell = 0` (no power against an outcome effect) and `m` the exposure
/// baseline gradient augmented by the next two basis functions, giving a
/// chi-squared(1) fit test. Requires a single error-prone covariate without
/// interaction, so that the augmented instrument dimension exceeds the
/// parameter count by exactly one.
pub fn exposure_gof_system(
    config: &ConfigFile,
    loaded: &LoadedData,
) -> Result<MomentSystem> {
    let data_cfg = config.data.as_ref().unwrap();
    let model_cfg = config
        .model
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("missing [model] section".into()))?;
    let model = resolve_model(model_cfg, &loaded.c_names)?;
    let g_a1 = require_g_a1(&model)?;
    let d_x = loaded.dataset.dim_x();
    let p2 = match data_cfg.exposure_kind {
        ExposureKind::Continuous => d_x * model.g_a2.dim(),
        _ => d_x,
    };
    if p2 != 1 {
        return Err(Error::InvalidConfig(
            "exposure goodness-of-fit needs a single error-prone covariate without interaction"
                .into(),
        ));
    }
    let b1 = g_a1.evaluate(&loaded.dataset)?.values;
    let aug = augmentation_columns(&g_a1, &loaded.dataset)?;
    let n = loaded.dataset.n();
    let p1 = b1.ncols();
    let dim = p1 + 2;
    let mut m = Array2::zeros((n, dim));
    for i in 0..n {
        for c in 0..p1 {
            m[[i, c]] = b1[[i, c]];
        }
        m[[i, p1]] = aug[[i, 0]];
        m[[i, p1 + 1]] = aug[[i, 1]];
    }
    let ell = Instruments::Zero(dim);
    let m = Instruments::Matrix(m);
    match data_cfg.exposure_kind {
        ExposureKind::Continuous => {
            MomentSystem::rps(g_a1, model.g_a2.clone(), ell, m, d_x)
        }
        ExposureKind::Binary => MomentSystem::rps_binary(g_a1, ell, m, d_x),
        ExposureKind::Count => MomentSystem::rps_count(g_a1, ell, m, d_x),
    }
}

/// Outcome-model goodness-of-fit: residual moments against the outcome
/// gradient augmented by the next two basis functions (a chi-squared(2)
/// fit test). Built as an outcome-only system over a synthetic unit
/// exposure so the generic GMM machinery applies unchanged.
pub fn outcome_gof_system(
    config: &ConfigFile,
    loaded: &LoadedData,
) -> Result<(MomentSystem, Dataset)> {
    let model_cfg = config
        .model
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("missing [model] section".into()))?;
    let model = resolve_model(model_cfg, &loaded.c_names)?;
    let outcome = require_outcome(&model)?;
    let aug = augmentation_columns(&outcome.map, &loaded.dataset)?;
    let n = loaded.dataset.n();
    let synthetic = Dataset::new(
        loaded.dataset.y.clone(),
        ndarray::Array1::ones(n),
        loaded.dataset.c.clone(),
        Array2::zeros((n, 0)),
    )?;
    let system = MomentSystem::ror(
        DesignMap::new(vec![BasisSpec::constant()]),
        outcome,
        model.score.clone(),
        Instruments::Matrix(aug),
        0,
    )?;
    Ok((system, synthetic))
}
