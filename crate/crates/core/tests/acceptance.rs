//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line.
//!
//! Criteria 1-5 are scaled Monte Carlo replications of the reference
//! validity and power experiments; 6-10 are property checks (moment
//! unbiasedness at the truth, solver oracle equivalence, optimal-instrument
//! algebra and efficiency, J-statistic invariance, and determinism).
//!
//! Run with `cargo test -p merit-core --test acceptance -- --nocapture`
//! to see the per-criterion lines.

use merit_core::*;
use ndarray::{Array1, Array2};
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

fn report(criterion: &str, pass: bool, detail: &str) {
    let tag = if pass { "PASS" } else { "FAIL" };
    println!("ACCEPTANCE {criterion}: {tag} - {detail}");
    assert!(pass, "criterion {criterion} failed: {detail}");
}

fn in_band(rate: f64, lo: f64, hi: f64) -> bool {
    rate >= lo && rate <= hi
}

// ---------------------------------------------------------------------
// Criterion 1: type-I-error calibration of the three robust tests at
// tau in {0.5, 0.7, 1.0}, both models correct, n = 2000, 2000 replicates,
// level 0.05; every rejection rate in [0.035, 0.065].
// ---------------------------------------------------------------------
#[test]
fn criterion_1_type_one_error_calibration() {
    let mut detail = String::new();
    let mut pass = true;
    for tau in [0.5, 0.7, 1.0] {
        let config = SimConfig {
            n: 2000,
            tau,
            psi0: 0.0,
            regime: Regime::BothCorrect,
            n_reps: 2000,
            seed: 1101,
            tests: vec![TestKind::Rps, TestKind::Ror, TestKind::Dr],
            alpha_level: 0.05,
        };
        let rep = run_monte_carlo(&config).unwrap();
        for row in &rep.rows {
            let ok = in_band(row.rejection_rate, 0.035, 0.065);
            pass &= ok;
            detail.push_str(&format!(
                "{}@tau={}: {:.4}{} ",
                row.test.as_str(),
                tau,
                row.rejection_rate,
                if ok { "" } else { "(!)" }
            ));
        }
    }
    report("1 (type-I calibration)", pass, detail.trim());
}

// ---------------------------------------------------------------------
// Criterion 2: selective invalidity at tau = 0.5, n = 5000, 500 reps.
// Outcome-correct regime: rps rejects (>= 0.55) while dr, ror stay in
// [0.03, 0.07]. Exposure-correct regime: ror rejects (>= 0.95) while
// dr, rps stay in [0.03, 0.07].
// ---------------------------------------------------------------------
#[test]
fn criterion_2_selective_invalidity() {
    let run = |regime: Regime| -> SimReport {
        run_monte_carlo(&SimConfig {
            n: 5000,
            tau: 0.5,
            psi0: 0.0,
            regime,
            n_reps: 500,
            seed: 1202,
            tests: vec![TestKind::Rps, TestKind::Ror, TestKind::Dr],
            alpha_level: 0.05,
        })
        .unwrap()
    };
    let my = run(Regime::OutcomeCorrect);
    let ma = run(Regime::ExposureCorrect);
    let rate = |rep: &SimReport, regime: Regime, test: TestKind| {
        rep.cell(regime, 0.5, test, 0.0).unwrap().rejection_rate
    };

    let my_rps = rate(&my, Regime::OutcomeCorrect, TestKind::Rps);
    let my_ror = rate(&my, Regime::OutcomeCorrect, TestKind::Ror);
    let my_dr = rate(&my, Regime::OutcomeCorrect, TestKind::Dr);
    let ma_ror = rate(&ma, Regime::ExposureCorrect, TestKind::Ror);
    let ma_rps = rate(&ma, Regime::ExposureCorrect, TestKind::Rps);
    let ma_dr = rate(&ma, Regime::ExposureCorrect, TestKind::Dr);

    let pass = my_rps >= 0.55
        && in_band(my_ror, 0.03, 0.07)
        && in_band(my_dr, 0.03, 0.07)
        && ma_ror >= 0.95
        && in_band(ma_rps, 0.03, 0.07)
        && in_band(ma_dr, 0.03, 0.07);
    report(
        "2 (selective invalidity)",
        pass,
        &format!(
            "outcome-correct: rps={my_rps:.3} ror={my_ror:.3} dr={my_dr:.3}; \
             exposure-correct: ror={ma_ror:.3} rps={ma_rps:.3} dr={ma_dr:.3}"
        ),
    );
}

// ---------------------------------------------------------------------
// Criterion 3: baseline breakdown. At tau = 0.5 (both correct, n = 2000,
// 500 reps) g-estimation and the standard outcome regression reject
// >= 0.95; at tau = 1 both are in [0.035, 0.065].
// ---------------------------------------------------------------------
#[test]
fn criterion_3_baseline_breakdown() {
    let run = |tau: f64| -> SimReport {
        run_monte_carlo(&SimConfig {
            n: 2000,
            tau,
            psi0: 0.0,
            regime: Regime::BothCorrect,
            n_reps: 500,
            seed: 1303,
            tests: vec![TestKind::GEstimation, TestKind::StandardOr],
            alpha_level: 0.05,
        })
        .unwrap()
    };
    let heavy = run(0.5);
    let clean = run(1.0);
    let rate = |rep: &SimReport, tau: f64, test: TestKind| {
        rep.cell(Regime::BothCorrect, tau, test, 0.0)
            .unwrap()
            .rejection_rate
    };
    let g_heavy = rate(&heavy, 0.5, TestKind::GEstimation);
    let o_heavy = rate(&heavy, 0.5, TestKind::StandardOr);
    let g_clean = rate(&clean, 1.0, TestKind::GEstimation);
    let o_clean = rate(&clean, 1.0, TestKind::StandardOr);
    let pass = g_heavy >= 0.95
        && o_heavy >= 0.95
        && in_band(g_clean, 0.035, 0.065)
        && in_band(o_clean, 0.035, 0.065);
    report(
        "3 (baseline breakdown)",
        pass,
        &format!(
            "tau=0.5: gest={g_heavy:.3} standard_or={o_heavy:.3}; \
             tau=1: gest={g_clean:.3} standard_or={o_clean:.3}"
        ),
    );
}

// ---------------------------------------------------------------------
// Criterion 4: power anchors of the robust propensity-score test at
// n = 5000, 500 replicates: psi0 = 0.02 at tau = 1 -> 0.80 +/- 0.10;
// psi0 = 0.06 at tau = 0.5 -> 0.80 +/- 0.10; psi0 = 0 -> 0.05 +/- 0.03;
// curves monotone nondecreasing in psi0 within 2 Monte Carlo SEs.
//
// The tau = 1 anchor is not attainable under this configuration (the
// measured power is ~0.48 for every weighting scheme and no reading of
// the generating mechanism reconciles all the quoted anchors); the
// check is implemented as stated and left red. See the analysis notes.
// ---------------------------------------------------------------------
#[test]
fn criterion_4_power_anchors() {
    let curve = |tau: f64| -> SimReport {
        power_curve(
            &SimConfig {
                n: 5000,
                tau,
                psi0: 0.0,
                regime: Regime::BothCorrect,
                n_reps: 500,
                seed: 1404,
                tests: vec![TestKind::Rps],
                alpha_level: 0.05,
            },
            &[0.0, 0.02, 0.04, 0.06, 0.08],
        )
        .unwrap()
    };
    let full = curve(1.0);
    let half = curve(0.5);
    let rate = |rep: &SimReport, tau: f64, psi: f64| {
        rep.cell(Regime::BothCorrect, tau, TestKind::Rps, psi)
            .unwrap()
            .rejection_rate
    };

    let p_full_002 = rate(&full, 1.0, 0.02);
    let p_half_006 = rate(&half, 0.5, 0.06);
    let p_null_full = rate(&full, 1.0, 0.0);
    let p_null_half = rate(&half, 0.5, 0.0);

    let monotone = |rep: &SimReport, tau: f64| -> bool {
        let grid = [0.0, 0.02, 0.04, 0.06, 0.08];
        grid.windows(2).all(|w| {
            let a = rep.cell(Regime::BothCorrect, tau, TestKind::Rps, w[0]).unwrap();
            let b = rep.cell(Regime::BothCorrect, tau, TestKind::Rps, w[1]).unwrap();
            let slack = 2.0 * (a.monte_carlo_se.powi(2) + b.monte_carlo_se.powi(2)).sqrt();
            b.rejection_rate >= a.rejection_rate - slack
        })
    };

    let anchor_full = (p_full_002 - 0.80).abs() <= 0.10;
    let anchor_half = (p_half_006 - 0.80).abs() <= 0.10;
    let anchor_null = (p_null_full - 0.05).abs() <= 0.03 && (p_null_half - 0.05).abs() <= 0.03;
    let mono = monotone(&full, 1.0) && monotone(&half, 0.5);
    let pass = anchor_full && anchor_half && anchor_null && mono;
    report(
        "4 (power anchors)",
        pass,
        &format!(
            "tau=1@0.02: {p_full_002:.3} (target 0.80+/-0.10); tau=0.5@0.06: {p_half_006:.3}; \
             null: {p_null_full:.3}/{p_null_half:.3}; monotone: {mono}"
        ),
    );
}

// ---------------------------------------------------------------------
// Criterion 5: null p-value uniformity of the doubly-robust test
// (both correct, tau = 0.7, n = 2000, 1000 replicates): the KS test
// against Uniform(0,1) does not reject at level 0.01.
// ---------------------------------------------------------------------
#[test]
fn criterion_5_pvalue_uniformity() {
    let config = SimConfig {
        n: 2000,
        tau: 0.7,
        psi0: 0.0,
        regime: Regime::BothCorrect,
        n_reps: 1000,
        seed: 1505,
        tests: vec![TestKind::Dr],
        alpha_level: 0.05,
    };
    let pvals = merit_core::simlab::pvalue_sample(&config, TestKind::Dr).unwrap();
    let (d, p) = merit_core::stats::ks_test_uniform(&pvals);
    report(
        "5 (p-value uniformity)",
        p > 0.01,
        &format!("KS statistic {d:.4}, KS p-value {p:.4} over {} fits", pvals.len()),
    );
}

// ---------------------------------------------------------------------
// Criterion 6: Monte Carlo unbiasedness of every moment kind at the
// (pseudo-)true parameter, n = 20000, 50 replicates: each coordinate's
// grand mean within 3 Monte Carlo standard errors of zero. Discrete
// kinds use the analytic MGF intercept shift (Gaussian error):
// +K for the binary and count-DR kinds, -K for the count
// propensity-score kind whose mean model carries exp(+a2'X).
// ---------------------------------------------------------------------
#[test]
fn criterion_6_moment_unbiasedness() {
    let n = 20_000;
    let reps = 50u64;
    let tau = 0.7;
    let mut pass = true;
    let mut detail = String::new();

    // Continuous kinds under the reference DGP at the true parameters.
    let continuous: Vec<(&str, MomentSystem, ParamVector)> = {
        let rps = merit_core::simlab::robust_system(TestKind::Rps, Regime::BothCorrect).unwrap();
        let ror = merit_core::simlab::robust_system(TestKind::Ror, Regime::BothCorrect).unwrap();
        let dr = merit_core::simlab::robust_system(TestKind::Dr, Regime::BothCorrect).unwrap();
        let theta_rps = ParamVector {
            alpha1: Array1::from(vec![0.0, 1.0]),
            alpha2: Array1::from(vec![1.0]),
            gamma: Array1::zeros(0),
            psi: None,
        };
        let theta_ror = ParamVector {
            alpha1: Array1::zeros(0),
            alpha2: Array1::from(vec![1.0]),
            gamma: Array1::from(vec![0.0, 0.5]),
            psi: None,
        };
        let theta_dr = ParamVector {
            alpha1: Array1::from(vec![0.0, 1.0]),
            alpha2: Array1::from(vec![1.0]),
            gamma: Array1::from(vec![0.0, 0.5]),
            psi: None,
        };
        vec![
            ("rps", rps, theta_rps),
            ("ror", ror, theta_ror),
            ("dr", dr, theta_dr),
        ]
    };
    for (name, sys, theta) in &continuous {
        let config = SimConfig {
            n,
            tau,
            psi0: 0.0,
            regime: Regime::BothCorrect,
            n_reps: 1,
            seed: 1606,
            tests: vec![TestKind::Rps],
            alpha_level: 0.05,
        };
        let ok = check_mean_zero(name, &mut detail, reps, |rep| {
            let draw = merit_core::simlab::generate(&config, rep);
            empirical_moments(sys, &draw.data, theta).unwrap()
        });
        pass &= ok;
    }

    // Discrete kinds under logistic / log-linear exposure draws with
    // independent Gaussian measurement error.
    let (a0, ac, a2, sig2) = (-0.3, 0.5, 0.4, 1.0);
    let k_binary = sig2 * a2 * a2 / 2.0;
    let scale = 0.3; // count model uses scaled coefficients to bound rates
    let a2c = scale * a2;
    let k_count = sig2 * a2c * a2c / 2.0;
    let g_a1 = || DesignMap::new(vec![BasisSpec::polynomial(0, 1, true)]);
    let linear = || DesignMap::new(vec![BasisSpec::polynomial(0, 1, true)]);
    let poly =
        || Instruments::Map(DesignMap::orthonormalized(vec![BasisSpec::polynomial(0, 3, true)]));

    let sys_bin = MomentSystem::rps_binary(g_a1(), poly(), poly(), 1).unwrap();
    let theta_bin = ParamVector {
        alpha1: Array1::from(vec![a0 + k_binary, ac]),
        alpha2: Array1::from(vec![a2]),
        gamma: Array1::zeros(0),
        psi: None,
    };
    let ok = check_mean_zero("rps_binary", &mut detail, reps, |rep| {
        let data = discrete_draw(n, rep, true, a0, ac, a2, sig2, scale);
        empirical_moments(&sys_bin, &data, &theta_bin).unwrap()
    });
    pass &= ok;

    let sys_cnt = MomentSystem::rps_count(g_a1(), poly(), poly(), 1).unwrap();
    let theta_cnt = ParamVector {
        alpha1: Array1::from(vec![scale * a0 - k_count, scale * ac]),
        alpha2: Array1::from(vec![a2c]),
        gamma: Array1::zeros(0),
        psi: None,
    };
    let ok = check_mean_zero("rps_count", &mut detail, reps, |rep| {
        let data = discrete_draw(n, rep, false, a0, ac, a2, sig2, scale);
        empirical_moments(&sys_cnt, &data, &theta_cnt).unwrap()
    });
    pass &= ok;

    let sys_ror_cnt = MomentSystem::ror_count(
        OutcomeModel::identity(linear()),
        None,
        Instruments::Map(linear()),
        1,
    )
    .unwrap();
    let theta_ror_cnt = ParamVector {
        alpha1: Array1::zeros(0),
        alpha2: Array1::from(vec![a2c]),
        gamma: Array1::from(vec![0.0, 0.5]),
        psi: None,
    };
    let ok = check_mean_zero("ror_count", &mut detail, reps, |rep| {
        let data = discrete_draw(n, rep, false, a0, ac, a2, sig2, scale);
        empirical_moments(&sys_ror_cnt, &data, &theta_ror_cnt).unwrap()
    });
    pass &= ok;

    let sys_dr_cnt = MomentSystem::dr_count(
        g_a1(),
        OutcomeModel::identity(linear()),
        None,
        Instruments::Map(DesignMap::new(vec![BasisSpec::custom("c0^2", true)])),
        Instruments::Map(linear()),
        Instruments::Map(linear()),
        1,
    )
    .unwrap();
    let theta_dr_cnt = ParamVector {
        alpha1: Array1::from(vec![scale * a0 + k_count, scale * ac]),
        alpha2: Array1::from(vec![a2c]),
        gamma: Array1::from(vec![0.0, 0.5]),
        psi: None,
    };
    let ok = check_mean_zero("dr_count", &mut detail, reps, |rep| {
        let data = discrete_draw(n, rep, false, a0, ac, a2, sig2, scale);
        empirical_moments(&sys_dr_cnt, &data, &theta_dr_cnt).unwrap()
    });
    pass &= ok;

    report("6 (moment unbiasedness)", pass, detail.trim());
}

/// Grand mean of per-replicate moment means within 3 MC SEs of zero,
/// coordinate-wise.
fn check_mean_zero<F>(name: &str, detail: &mut String, reps: u64, draw_means: F) -> bool
where
    F: Fn(u64) -> Array1<f64> + Sync,
{
    let all: Vec<Array1<f64>> = (0..reps).into_par_iter().map(&draw_means).collect();
    let dim = all[0].len();
    let mut ok = true;
    let mut worst = 0.0f64;
    for j in 0..dim {
        let vals: Vec<f64> = all.iter().map(|m| m[j]).collect();
        let mean = vals.iter().sum::<f64>() / reps as f64;
        let var =
            vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (reps as f64 - 1.0);
        let se = (var / reps as f64).sqrt();
        let z = if se > 0.0 { mean.abs() / se } else { 0.0 };
        worst = worst.max(z);
        ok &= z <= 3.0;
    }
    detail.push_str(&format!("{name}: max|z|={worst:.2} "));
    ok
}

/// Logistic (binary) or log-linear (count) exposure draws with Gaussian
/// classical measurement error independent of everything.
#[allow(clippy::too_many_arguments)]
fn discrete_draw(
    n: usize,
    rep: u64,
    binary: bool,
    a0: f64,
    ac: f64,
    a2: f64,
    sig2: f64,
    scale: f64,
) -> Dataset {
    let mut rng = ChaCha12Rng::seed_from_u64(1707);
    rng.set_stream(rep);
    let mut y = Array1::zeros(n);
    let mut a = Array1::zeros(n);
    let mut c = Array2::zeros((n, 1));
    let mut x = Array2::zeros((n, 1));
    for i in 0..n {
        let y0: f64 = rng.sample(StandardNormal);
        let cc: f64 = y0 + rng.sample::<f64, _>(StandardNormal);
        let xs: f64 = y0 + cc + y0 * cc + rng.sample::<f64, _>(StandardNormal);
        let lin = a0 + ac * cc + a2 * xs;
        let ai = if binary {
            f64::from(rng.gen::<f64>() < 1.0 / (1.0 + (-lin).exp()))
        } else {
            poisson_draw(&mut rng, (scale * lin).exp())
        };
        y[i] = y0;
        a[i] = ai;
        c[[i, 0]] = cc;
        x[[i, 0]] = xs + sig2.sqrt() * rng.sample::<f64, _>(StandardNormal);
    }
    Dataset::new(y, a, c, x).unwrap()
}

fn poisson_draw(rng: &mut ChaCha12Rng, lambda: f64) -> f64 {
    let mut k = 0f64;
    let mut p = (-lambda).exp();
    let mut cdf = p;
    let u: f64 = rng.gen();
    while u > cdf && k < 500.0 {
        k += 1.0;
        p *= lambda / k;
        cdf += p;
    }
    k
}

// ---------------------------------------------------------------------
// Criterion 7: solver oracle equivalence. On 100 random linear
// propensity-score systems the two-step fit matches the closed-form
// linear-GMM solution within 1e-6 in the parameter and
// 1e-8 * (1 + J) in the J statistic.
// ---------------------------------------------------------------------
#[test]
fn criterion_7_solver_oracle_equivalence() {
    let mut worst_theta = 0.0f64;
    let mut worst_j = 0.0f64;
    for instance in 0..100u64 {
        let mut rng = ChaCha12Rng::seed_from_u64(1808 + instance);
        let n = rng.gen_range(300..900);
        let tau = rng.gen_range(0.5..1.0);
        let config = SimConfig {
            n,
            tau,
            psi0: 0.0,
            regime: Regime::BothCorrect,
            n_reps: 1,
            seed: 1808,
            tests: vec![TestKind::Rps],
            alpha_level: 0.05,
        };
        let draw = merit_core::simlab::generate(&config, instance);
        let sys = merit_core::simlab::robust_system(TestKind::Rps, Regime::BothCorrect).unwrap();
        let fit = gmm_minimize(&sys, &draw.data, &WeightingScheme::two_step(), None).unwrap();

        // Closed-form oracle: affine moments U(theta) = u0 - G theta solved
        // by direct matrix algebra, with the same two-step weight sequence.
        let bound = sys.bind(&draw.data).unwrap();
        let layout = sys.layout();
        let zero = ParamVector::zeros(layout);
        let u0 = bound.mean_moments(&zero).unwrap();
        let g = -bound.mean_jacobian(&zero).unwrap();
        let gtg = g.t().dot(&g);
        let gtu = g.t().dot(&u0);
        let theta0 = merit_core::linalg::solve_spd(&gtg, &gtu).unwrap();
        let omega = covariance_iid(
            &sys,
            &draw.data,
            &ParamVector::from_flat(layout, theta0.as_slice().unwrap()).unwrap(),
        )
        .unwrap();
        let w = merit_core::linalg::SpdInverse::new(&omega).unwrap();
        let wg = w.solve_mat(&g);
        let gwg = g.t().dot(&wg);
        let gwu = g.t().dot(&w.solve_vec(&u0));
        let theta_closed = merit_core::linalg::solve_spd(&gwg, &gwu).unwrap();
        let resid = &u0 - &g.dot(&theta_closed);
        let j_closed = n as f64 * w.quad_form(&resid);

        let flat = fit.theta_hat.to_flat();
        let dev = flat
            .iter()
            .zip(theta_closed.iter())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        worst_theta = worst_theta.max(dev);
        worst_j = worst_j.max((fit.j_stat - j_closed).abs() / (1.0 + j_closed));
    }
    report(
        "7 (solver oracle equivalence)",
        worst_theta < 1e-6 && worst_j < 1e-8,
        &format!("max |theta dev| = {worst_theta:.2e}, max relative J dev = {worst_j:.2e}"),
    );
}

// ---------------------------------------------------------------------
// Criterion 8: optimal-instrument algebra and efficiency. The
// constructed pairs solve the defining 2x2 conditional-moment system
// within 1e-10 on 1000 random valid inputs, and with analytic
// conditional moments the Monte Carlo variance of the effect estimate
// is at most 105% of the default-instrument variance (>= 500 reps).
// ---------------------------------------------------------------------
#[test]
fn criterion_8_optimal_instruments() {
    // Part 1: the 2x2 characterization on random valid moment sets.
    let mut worst = 0.0f64;
    for seed in 0..1000u64 {
        let cm = random_moment_set(seed, 8, 2);
        let mut rng = ChaCha12Rng::seed_from_u64(9000 + seed);
        let nrows = cm.n();
        let b1 = Array2::from_shape_fn((nrows, 2), |_| rng.gen_range(-1.0..1.0));
        let b2 = Array2::from_shape_fn((nrows, 1), |_| rng.gen_range(-1.0..1.0));
        let opt = optimal_instruments(&cm, &b1, &b2).unwrap();
        for i in 0..nrows {
            let mut check = |col: usize, ev: f64, ew: f64| {
                let l = opt.ell[[i, col]];
                let m = opt.m[[i, col]];
                worst = worst.max((cm.d2h2[i] * l + cm.d2h[i] * m - ev).abs());
                worst = worst.max((cm.d2h[i] * l + cm.d2[i] * m - ew).abs());
            };
            check(0, cm.da[i], 0.0);
            for c in 0..2 {
                check(1 + c, cm.h[i] * b1[[i, c]], b1[[i, c]]);
            }
            for j in 0..2 {
                check(3 + j, cm.hx[[i, j]] * b2[[i, 0]], cm.x[[i, j]] * b2[[i, 0]]);
            }
        }
    }
    let algebra_ok = worst < 1e-10;

    // Part 2: efficiency at desk scale. Effect estimation with analytic
    // optimal instruments vs the default instruments, 500 replicates.
    let tau = 0.7;
    let n = 1000;
    let n_reps = 500u64;
    let scheme = WeightingScheme::iterated();
    let run = |optimal: bool| -> Vec<f64> {
        (0..n_reps)
            .into_par_iter()
            .filter_map(|rep| {
                let config = SimConfig {
                    n,
                    tau,
                    psi0: 0.0,
                    regime: Regime::BothCorrect,
                    n_reps: 1,
                    seed: 1909,
                    tests: vec![TestKind::Rps],
                    alpha_level: 0.05,
                };
                let draw = merit_core::simlab::generate(&config, rep);
                let g_a1 = DesignMap::new(vec![BasisSpec::polynomial(0, 1, true)]);
                let g_a2 = DesignMap::new(vec![BasisSpec::constant()]);
                let sys = if optimal {
                    let cm =
                        merit_core::simlab::dgp_conditional_moments(&draw.data, tau).unwrap();
                    let b1 = g_a1.evaluate(&draw.data).unwrap().values;
                    let b2 = Array2::ones((draw.data.n(), 1));
                    let oi = optimal_instruments(&cm, &b1, &b2).unwrap();
                    MomentSystem::rps(
                        g_a1,
                        g_a2,
                        Instruments::Matrix(oi.ell),
                        Instruments::Matrix(oi.m),
                        1,
                    )
                    .unwrap()
                } else {
                    merit_core::simlab::robust_system(TestKind::Rps, Regime::BothCorrect)
                        .unwrap()
                };
                estimate_effect(&sys, &draw.data, &scheme, PsiSearch::default())
                    .ok()
                    .map(|e| e.psi_hat)
            })
            .collect()
    };
    let def = run(false);
    let opt = run(true);
    let var = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|&x| (x - m) * (x - m)).sum::<f64>() / (v.len() as f64 - 1.0)
    };
    let ratio = var(&opt) / var(&def);
    let enough = def.len() >= (n_reps as usize) * 9 / 10 && opt.len() >= (n_reps as usize) * 9 / 10;
    let pass = algebra_ok && ratio <= 1.05 && enough;
    report(
        "8 (optimal instruments)",
        pass,
        &format!(
            "2x2 residual max = {worst:.2e}; variance ratio = {ratio:.3} \
             (optimal {} / default {} estimates)",
            opt.len(),
            def.len()
        ),
    );
}

/// Random valid conditional moment sets: the delta-square moments realized
/// from finite mixtures so Cauchy-Schwarz keeps the determinant positive.
fn random_moment_set(seed: u64, n: usize, d_x: usize) -> ConditionalMomentSet {
    let mut rng = ChaCha12Rng::seed_from_u64(8800 + seed);
    let mut d2 = Array1::zeros(n);
    let mut d2h = Array1::zeros(n);
    let mut d2h2 = Array1::zeros(n);
    for i in 0..n {
        let (mut m0, mut m1, mut m2) = (0.0, 0.0, 0.0);
        for _ in 0..6 {
            let delta: f64 = 0.2 + rng.gen_range(0.0..2.0);
            let h: f64 = rng.sample(StandardNormal);
            m0 += delta * delta;
            m1 += delta * delta * h;
            m2 += delta * delta * h * h;
        }
        d2[i] = m0 / 6.0;
        d2h[i] = m1 / 6.0;
        d2h2[i] = m2 / 6.0;
    }
    let da = Array1::from_shape_fn(n, |_| rng.gen_range(-2.0..2.0));
    let h = Array1::from_shape_fn(n, |_| rng.gen_range(-1.5..1.5));
    let x = Array2::from_shape_fn((n, d_x), |_| rng.gen_range(-2.0..2.0));
    let hx = Array2::from_shape_fn((n, d_x), |_| rng.gen_range(-2.0..2.0));
    ConditionalMomentSet::from_parts(MomentSource::Analytic, d2, d2h, d2h2, da, h, x, hx).unwrap()
}

// ---------------------------------------------------------------------
// Criterion 9: J-statistic invariance to invertible instrument
// recombination under continuous updating, 100 random instances,
// tolerance 1e-6.
// ---------------------------------------------------------------------
#[test]
fn criterion_9_j_invariance() {
    let mut worst = 0.0f64;
    for instance in 0..100u64 {
        let mut rng = ChaCha12Rng::seed_from_u64(2010 + instance);
        let config = SimConfig {
            n: 300,
            tau: rng.gen_range(0.5..1.0),
            psi0: 0.0,
            regime: Regime::BothCorrect,
            n_reps: 1,
            seed: 2010,
            tests: vec![TestKind::Rps],
            alpha_level: 0.05,
        };
        let draw = merit_core::simlab::generate(&config, instance);
        let n = draw.data.n();

        // Base instruments: cubic polynomial columns for ell, none for m.
        let mut ell = Array2::zeros((n, 4));
        for i in 0..n {
            let c = draw.data.c[[i, 0]];
            ell[[i, 0]] = 1.0;
            ell[[i, 1]] = c;
            ell[[i, 2]] = c * c;
            ell[[i, 3]] = c * c * c;
        }
        // Well-conditioned random recombination T: identity plus a small
        // random perturbation, then scaled rows.
        let mut t = Array2::eye(4);
        for r in 0..4 {
            for c in 0..4 {
                t[[r, c]] += rng.gen_range(-0.3..0.3);
            }
        }
        let ell_t = ell.dot(&t.t());

        let g_a1 = DesignMap::new(vec![BasisSpec::polynomial(0, 1, true)]);
        let g_a2 = DesignMap::new(vec![BasisSpec::constant()]);
        let fit = |zl: Array2<f64>| -> f64 {
            let sys = MomentSystem::rps(
                g_a1.clone(),
                g_a2.clone(),
                Instruments::Matrix(zl),
                Instruments::Zero(4),
                1,
            )
            .unwrap();
            gmm_minimize(&sys, &draw.data, &WeightingScheme::cue(), None)
                .unwrap()
                .j_stat
        };
        let j_base = fit(ell);
        let j_recomb = fit(ell_t);
        worst = worst.max((j_base - j_recomb).abs());
    }
    report(
        "9 (J invariance)",
        worst < 1e-6,
        &format!("max |J difference| = {worst:.2e} across 100 recombinations"),
    );
}

// ---------------------------------------------------------------------
// Criterion 10: determinism. Identical (config, seed) produce identical
// report bytes under thread pools of size 1, 2, and 8.
// ---------------------------------------------------------------------
#[test]
fn criterion_10_determinism() {
    let config = SimConfig {
        n: 600,
        tau: 0.7,
        psi0: 0.0,
        regime: Regime::BothCorrect,
        n_reps: 64,
        seed: 2111,
        tests: vec![TestKind::Rps, TestKind::Dr, TestKind::StandardOr],
        alpha_level: 0.05,
    };
    let mut outputs = Vec::new();
    for threads in [1usize, 2, 8] {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap();
        let csv = pool.install(|| run_monte_carlo(&config).unwrap().to_csv_string());
        outputs.push((threads, csv));
    }
    let identical = outputs.windows(2).all(|w| w[0].1 == w[1].1);
    report(
        "10 (determinism)",
        identical,
        &format!(
            "{} bytes, identical across pools of 1, 2, 8 threads: {identical}",
            outputs[0].1.len()
        ),
    );
}
