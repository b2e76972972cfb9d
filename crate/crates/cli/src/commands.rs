//! Command implementations. Each command returns the number of statistical
//! warnings it produced; the caller maps that to the exit code (0, or 2
//! under `--strict` when warnings are present; hard errors become 1).

use std::path::{Path, PathBuf};

use merit_core::{
    estimate_effect, gmm_minimize, power_curve, run_monte_carlo, Bandwidth, CovarianceKind,
    Error, PsiSearch, Regime, Result, SimConfig, SimReport, TestKind, WeightKind,
    WeightingScheme,
};

use crate::build;
use crate::config::{self, ConfigFile, RobustTestKind, TestConfig, WeightingName};
use crate::data::{self, LoadedData};
use crate::report::{self, EstimateReport, GofReport, TestReport, ThetaReport, WeightingReport};

pub struct CommandContext {
    pub config: ConfigFile,
    pub config_hash: String,
    pub out_dir: PathBuf,
    pub seed: Option<u64>,
    pub strict: bool,
}

impl CommandContext {
    pub fn load(
        config_path: &Path,
        out_dir: PathBuf,
        seed: Option<u64>,
        strict: bool,
    ) -> Result<Self> {
        let bytes = std::fs::read(config_path).map_err(|e| {
            Error::InvalidConfig(format!("cannot read '{}': {e}", config_path.display()))
        })?;
        let config = ConfigFile::parse(std::str::from_utf8(&bytes).map_err(|_| {
            Error::InvalidConfig("config file is not valid UTF-8".into())
        })?)?;
        std::fs::create_dir_all(&out_dir).map_err(|e| {
            Error::InvalidData(format!("cannot create '{}': {e}", out_dir.display()))
        })?;
        Ok(CommandContext {
            config,
            config_hash: config::config_hash(&bytes),
            out_dir,
            seed,
            strict,
        })
    }
}

fn weighting_scheme(test: &TestConfig, time_ordered: bool) -> Result<(WeightingScheme, Vec<String>)> {
    let mut warnings = Vec::new();
    let kind = match test.weighting {
        WeightingName::TwoStep => WeightKind::TwoStep,
        WeightingName::Iterated => WeightKind::Iterated {
            max_iter: test.max_iter,
            tol: test.tol,
        },
        WeightingName::Cue => WeightKind::Cue,
    };
    let covariance = match &test.hac_bandwidth {
        None => CovarianceKind::Iid,
        Some(v) => {
            if !time_ordered {
                warnings.push(
                    "HAC weighting configured but the time column is not sorted ascending"
                        .to_string(),
                );
            }
            let bandwidth = match v {
                toml::Value::String(s) if s == "auto" => Bandwidth::Auto,
                toml::Value::Integer(i) if *i >= 0 => Bandwidth::Fixed(*i as usize),
                other => {
                    return Err(Error::InvalidConfig(format!(
                        "hac_bandwidth must be \"auto\" or a nonnegative integer, got {other}"
                    )))
                }
            };
            CovarianceKind::Hac { bandwidth }
        }
    };
    Ok((WeightingScheme { kind, covariance }, warnings))
}

fn is_time_sorted(loaded: &LoadedData) -> bool {
    match loaded.time_index {
        None => true,
        Some(idx) => {
            let t = loaded.dataset.c.column(idx);
            t.iter().zip(t.iter().skip(1)).all(|(a, b)| a <= b)
        }
    }
}

fn load_analysis(ctx: &CommandContext, data_path: &Path) -> Result<(LoadedData, TestConfig)> {
    let data_cfg = ctx
        .config
        .data
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("missing [data] section".into()))?;
    let test_cfg = ctx
        .config
        .test
        .clone()
        .ok_or_else(|| Error::InvalidConfig("missing [test] section".into()))?;
    let loaded = data::load_csv(data_path, data_cfg)?;
    Ok((loaded, test_cfg))
}

/// `merit test`: run the configured robust test (plus goodness-of-fit
/// checks when requested) and write `report.json`.
pub fn run_test(ctx: &CommandContext, data_path: &Path) -> Result<usize> {
    let (loaded, test_cfg) = load_analysis(ctx, data_path)?;
    let system = build::build_test_system(&ctx.config, &test_cfg, &loaded)?;
    build::require_overidentified(&system)?;
    let (scheme, mut warnings) = weighting_scheme(&test_cfg, is_time_sorted(&loaded))?;

    // Goodness-of-fit first: a rejection is a warning, not a failure, since
    // a rejection may otherwise just reflect a poorly fitting model.
    let mut gof = Vec::new();
    if test_cfg.gof {
        if matches!(test_cfg.kind, RobustTestKind::Rps | RobustTestKind::Dr) {
            let sys = build::exposure_gof_system(&ctx.config, &loaded)?;
            let fit = gmm_minimize(&sys, &loaded.dataset, &scheme, None)?;
            if fit.p_value < test_cfg.alpha_level {
                warnings.push(format!(
                    "exposure-model goodness-of-fit rejects (p = {:.4}); a main-test rejection may reflect model misspecification rather than a treatment effect",
                    fit.p_value
                ));
            }
            gof.push(GofReport {
                model: "exposure".into(),
                j_stat: fit.j_stat,
                df: fit.df,
                p_value: fit.p_value,
            });
        }
        if matches!(test_cfg.kind, RobustTestKind::Ror | RobustTestKind::Dr) {
            let (sys, synthetic) = build::outcome_gof_system(&ctx.config, &loaded)?;
            let fit = gmm_minimize(&sys, &synthetic, &scheme, None)?;
            if fit.p_value < test_cfg.alpha_level {
                warnings.push(format!(
                    "outcome-model goodness-of-fit rejects (p = {:.4}); a main-test rejection may reflect model misspecification rather than a treatment effect",
                    fit.p_value
                ));
            }
            gof.push(GofReport {
                model: "outcome".into(),
                j_stat: fit.j_stat,
                df: fit.df,
                p_value: fit.p_value,
            });
        }
    }

    let fit = gmm_minimize(&system, &loaded.dataset, &scheme, None)?;
    warnings.extend(report::fit_warnings(&fit));

    let weighting = WeightingReport::describe(&scheme, loaded.dataset.n());
    println!(
        "{} test: J = {:.4} (df = {}), p = {:.4} [{}]",
        test_cfg.kind.as_str(),
        fit.j_stat,
        fit.df,
        fit.p_value,
        weighting.human()
    );
    for g in &gof {
        println!(
            "  gof {}: J = {:.4} (df = {}), p = {:.4} [{}]",
            g.model,
            g.j_stat,
            g.df,
            g.p_value,
            weighting.human()
        );
    }
    for w in &warnings {
        println!("  warning: {w}");
    }

    let out = TestReport {
        test: test_cfg.kind.as_str().into(),
        exposure_kind: format!("{:?}", system.exposure_kind()).to_lowercase(),
        n: loaded.dataset.n(),
        dropped_rows: loaded.dropped_rows,
        j_stat: fit.j_stat,
        df: fit.df,
        p_value: fit.p_value,
        theta: ThetaReport::from_fit(&fit),
        weighting,
        n_iterations: fit.n_iterations,
        converged: fit.converged,
        gof,
        warnings: warnings.clone(),
        config_hash: ctx.config_hash.clone(),
        seed: ctx.seed,
    };
    report::write_json(&ctx.out_dir.join("report.json"), &out)?;
    Ok(warnings.len())
}

/// `merit estimate`: profile the structural effect through the configured
/// test system; writes `estimate.json` and `profile.csv`.
pub fn run_estimate(ctx: &CommandContext, data_path: &Path) -> Result<usize> {
    let (loaded, test_cfg) = load_analysis(ctx, data_path)?;
    let system = build::build_test_system(&ctx.config, &test_cfg, &loaded)?;
    build::require_overidentified(&system)?;
    let (scheme, mut warnings) = weighting_scheme(&test_cfg, is_time_sorted(&loaded))?;

    let est_cfg = ctx.config.estimate.clone().unwrap_or_default();
    let search = match est_cfg.psi_grid {
        Some(grid) => PsiSearch::Grid(grid),
        None => PsiSearch::Auto {
            points: est_cfg.grid_points,
            half_width_ses: est_cfg.half_width_ses,
        },
    };
    let estimate = estimate_effect(&system, &loaded.dataset, &scheme, search)?;
    warnings.extend(report::fit_warnings(&estimate.fit));

    let weighting = WeightingReport::describe(&scheme, loaded.dataset.n());
    println!(
        "effect estimate: psi = {:.6} (se {:.6}); J at optimum = {:.4} (df = {}) [{}]",
        estimate.psi_hat,
        estimate.std_err,
        estimate.fit.j_stat,
        estimate.fit.df,
        weighting.human()
    );
    for w in &warnings {
        println!("  warning: {w}");
    }

    let out = EstimateReport {
        test: test_cfg.kind.as_str().into(),
        exposure_kind: format!("{:?}", system.exposure_kind()).to_lowercase(),
        n: loaded.dataset.n(),
        dropped_rows: loaded.dropped_rows,
        psi_hat: estimate.psi_hat,
        std_err: estimate.std_err,
        j_at_psi_hat: estimate.fit.j_stat,
        df: estimate.fit.df,
        theta: ThetaReport::from_fit(&estimate.fit),
        weighting,
        converged: estimate.fit.converged,
        warnings: warnings.clone(),
        config_hash: ctx.config_hash.clone(),
        seed: ctx.seed,
    };
    report::write_json(&ctx.out_dir.join("estimate.json"), &out)?;
    std::fs::write(
        ctx.out_dir.join("profile.csv"),
        report::profile_csv(&estimate.profile),
    )
    .map_err(|e| Error::InvalidData(format!("cannot write profile.csv: {e}")))?;
    Ok(warnings.len())
}

fn parse_tests(names: &[String]) -> Result<Vec<TestKind>> {
    names.iter().map(|s| TestKind::parse(s)).collect()
}

/// `merit simulate`: rejection-rate grid over reliability ratios and
/// model-specification regimes; writes `simreport.csv` and
/// `simreport.json`.
pub fn run_simulate(ctx: &CommandContext) -> Result<usize> {
    let exp = ctx
        .config
        .simulate
        .clone()
        .ok_or_else(|| Error::InvalidConfig("missing [simulate] section".into()))?;
    let seed = ctx.seed.unwrap_or(exp.seed);
    let tests = parse_tests(&exp.tests)?;
    let regimes: Vec<Regime> = if exp.regimes.is_empty() {
        vec![Regime::BothCorrect]
    } else {
        exp.regimes
            .iter()
            .map(|r| config::parse_regime(r))
            .collect::<Result<_>>()?
    };

    let mut report_all = SimReport::default();
    for &regime in &regimes {
        for &tau in &exp.taus {
            let cell = SimConfig {
                n: exp.n,
                tau,
                psi0: exp.psi0,
                regime,
                n_reps: exp.n_reps,
                seed,
                tests: tests.clone(),
                alpha_level: exp.alpha_level,
            };
            report_all.merge(run_monte_carlo(&cell)?);
        }
    }

    let csv = report::sim_report_csv(&report_all);
    report::write_csv_with_header(
        &ctx.out_dir.join("simreport.csv"),
        &ctx.config_hash,
        seed,
        &csv,
    )?;
    report::write_json(
        &ctx.out_dir.join("simreport.json"),
        &report::SimReportJson {
            config_hash: &ctx.config_hash,
            seed,
            rows: &report_all.rows,
        },
    )?;
    println!(
        "simulate: {} cells written to {}",
        report_all.rows.len(),
        ctx.out_dir.join("simreport.csv").display()
    );
    Ok(0)
}

/// `merit power`: rejection-rate curves over a grid of structural effects;
/// writes `power.csv` and `power.json`.
pub fn run_power(ctx: &CommandContext) -> Result<usize> {
    let exp = ctx
        .config
        .power
        .clone()
        .ok_or_else(|| Error::InvalidConfig("missing [power] section".into()))?;
    if exp.psi_grid.is_empty() {
        return Err(Error::InvalidConfig(
            "[power] needs a nonempty psi_grid".into(),
        ));
    }
    let seed = ctx.seed.unwrap_or(exp.seed);
    let tests = parse_tests(&exp.tests)?;

    let mut report_all = SimReport::default();
    for &tau in &exp.taus {
        let base = SimConfig {
            n: exp.n,
            tau,
            psi0: 0.0,
            regime: Regime::BothCorrect,
            n_reps: exp.n_reps,
            seed,
            tests: tests.clone(),
            alpha_level: exp.alpha_level,
        };
        report_all.merge(power_curve(&base, &exp.psi_grid)?);
    }

    let csv = report::sim_report_csv(&report_all);
    report::write_csv_with_header(&ctx.out_dir.join("power.csv"), &ctx.config_hash, seed, &csv)?;
    report::write_json(
        &ctx.out_dir.join("power.json"),
        &report::SimReportJson {
            config_hash: &ctx.config_hash,
            seed,
            rows: &report_all.rows,
        },
    )?;
    println!(
        "power: {} cells written to {}",
        report_all.rows.len(),
        ctx.out_dir.join("power.csv").display()
    );
    Ok(0)
}
