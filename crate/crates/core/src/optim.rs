//! Internal minimizers for the GMM quadratic form: Gauss-Newton with
//! Levenberg damping on whitened moment residuals, and a Nelder-Mead
//! simplex fallback for objectives without a usable residual structure
//! (continuous-updating weighting).

use ndarray::{Array1, Array2};

use crate::error::Result;
use crate::linalg;

pub struct GaussNewtonResult {
    pub x: Array1<f64>,
    pub objective: f64,
    pub converged: bool,
    pub n_iter: usize,
}

/// Minimizes `|| r(x) ||^2` given the residual vector and its Jacobian.
///
/// `residual` returns `r(x)` (length m >= dim x) and `jacobian` returns the
/// `m x dim` matrix of partial derivatives. Levenberg damping with a
/// multiplicative schedule; converges when the step or the relative
/// objective change is negligible.
pub fn gauss_newton<R, J>(
    x0: &Array1<f64>,
    mut residual: R,
    mut jacobian: J,
    max_iter: usize,
) -> Result<GaussNewtonResult>
where
    R: FnMut(&Array1<f64>) -> Result<Array1<f64>>,
    J: FnMut(&Array1<f64>) -> Result<Array2<f64>>,
{
    let dim = x0.len();
    let mut x = x0.clone();
    let mut r = residual(&x)?;
    let mut obj = r.dot(&r);
    let mut lambda = 1e-6;
    let mut converged = false;
    let mut iter = 0;

    if dim == 0 {
        return Ok(GaussNewtonResult {
            x,
            objective: obj,
            converged: true,
            n_iter: 0,
        });
    }

    while iter < max_iter {
        iter += 1;
        let jac = jacobian(&x)?;
        let jtj = jac.t().dot(&jac);
        let jtr = jac.t().dot(&r);
        let grad_norm = jtr.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if grad_norm < 1e-14 * (1.0 + obj) {
            converged = true;
            break;
        }
        let scale = {
            let mut s = 0.0f64;
            for d in 0..dim {
                s = s.max(jtj[[d, d]]);
            }
            if s > 0.0 {
                s
            } else {
                1.0
            }
        };

        let mut accepted = false;
        for _ in 0..25 {
            let mut damped = jtj.clone();
            for d in 0..dim {
                damped[[d, d]] += lambda * scale;
            }
            let step = match linalg::solve_spd(&damped, &jtr) {
                Ok(s) => s,
                Err(_) => {
                    lambda = (lambda * 10.0).min(1e12);
                    continue;
                }
            };
            let candidate = &x - &step;
            let r_new = residual(&candidate)?;
            let obj_new = r_new.dot(&r_new);
            if obj_new.is_finite() && obj_new <= obj {
                let step_small = step
                    .iter()
                    .zip(x.iter())
                    .all(|(s, xv)| s.abs() <= 1e-11 * (1.0 + xv.abs()));
                let rel_change = (obj - obj_new) / (1.0 + obj);
                x = candidate;
                r = r_new;
                obj = obj_new;
                lambda = (lambda / 3.0).max(1e-12);
                accepted = true;
                if step_small || rel_change < 1e-13 {
                    converged = true;
                }
                break;
            }
            lambda = (lambda * 10.0).min(1e12);
        }
        if !accepted || converged {
            converged = converged || !accepted && obj.is_finite();
            break;
        }
    }

    Ok(GaussNewtonResult {
        x,
        objective: obj,
        converged,
        n_iter: iter,
    })
}

pub struct NelderMeadResult {
    pub x: Array1<f64>,
    pub objective: f64,
    pub converged: bool,
    pub n_eval: usize,
}

/// Deterministic Nelder-Mead simplex minimization.
pub fn nelder_mead<F>(
    x0: &Array1<f64>,
    initial_scale: f64,
    mut f: F,
    tol: f64,
    max_eval: usize,
) -> Result<NelderMeadResult>
where
    F: FnMut(&Array1<f64>) -> Result<f64>,
{
    let dim = x0.len();
    let mut n_eval = 0usize;
    let mut eval = |x: &Array1<f64>, n_eval: &mut usize| -> Result<f64> {
        *n_eval += 1;
        let v = f(x)?;
        Ok(if v.is_finite() { v } else { f64::MAX / 4.0 })
    };

    if dim == 0 {
        let v = eval(x0, &mut n_eval)?;
        return Ok(NelderMeadResult {
            x: x0.clone(),
            objective: v,
            converged: true,
            n_eval,
        });
    }

    // Initial simplex: x0 plus per-coordinate perturbations.
    let mut simplex: Vec<(Array1<f64>, f64)> = Vec::with_capacity(dim + 1);
    let v0 = eval(x0, &mut n_eval)?;
    simplex.push((x0.clone(), v0));
    for d in 0..dim {
        let mut xd = x0.clone();
        let h = initial_scale * (1.0 + xd[d].abs());
        xd[d] += h;
        let vd = eval(&xd, &mut n_eval)?;
        simplex.push((xd, vd));
    }

    let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);
    let mut converged = false;

    while n_eval < max_eval {
        simplex.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
        let best = simplex[0].1;
        let worst = simplex[dim].1;
        if (worst - best).abs() <= tol * (1.0 + best.abs()) {
            let spread = (0..dim)
                .map(|d| {
                    let lo = simplex.iter().map(|(x, _)| x[d]).fold(f64::MAX, f64::min);
                    let hi = simplex.iter().map(|(x, _)| x[d]).fold(f64::MIN, f64::max);
                    hi - lo
                })
                .fold(0.0f64, f64::max);
            if spread <= 1e-9 * (1.0 + simplex[0].0.iter().fold(0.0f64, |m, v| m.max(v.abs()))) {
                converged = true;
                break;
            }
        }

        // Centroid of all but the worst vertex.
        let mut centroid = Array1::zeros(dim);
        for (x, _) in simplex.iter().take(dim) {
            centroid += x;
        }
        centroid /= dim as f64;

        let reflect = &centroid + &((&centroid - &simplex[dim].0) * alpha);
        let v_reflect = eval(&reflect, &mut n_eval)?;

        if v_reflect < simplex[0].1 {
            let expand = &centroid + &((&reflect - &centroid) * gamma);
            let v_expand = eval(&expand, &mut n_eval)?;
            simplex[dim] = if v_expand < v_reflect {
                (expand, v_expand)
            } else {
                (reflect, v_reflect)
            };
        } else if v_reflect < simplex[dim - 1].1 {
            simplex[dim] = (reflect, v_reflect);
        } else {
            let contract = &centroid + &((&simplex[dim].0 - &centroid) * rho);
            let v_contract = eval(&contract, &mut n_eval)?;
            if v_contract < simplex[dim].1 {
                simplex[dim] = (contract, v_contract);
            } else {
                // Shrink toward the best vertex.
                let best_x = simplex[0].0.clone();
                for v in simplex.iter_mut().skip(1) {
                    let x_new = &best_x + &((&v.0 - &best_x) * sigma);
                    let val = eval(&x_new, &mut n_eval)?;
                    *v = (x_new, val);
                }
            }
        }
    }

    simplex.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
    let (x, objective) = simplex.swap_remove(0);
    Ok(NelderMeadResult {
        x,
        objective,
        converged,
        n_eval,
    })
}

/// Golden-section minimization of a univariate function on `[lo, hi]`.
pub fn golden_section<F>(mut f: F, lo: f64, hi: f64, tol: f64, max_iter: usize) -> Result<(f64, f64)>
where
    F: FnMut(f64) -> Result<f64>,
{
    let inv_phi = (5.0f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = f(c)?;
    let mut fd = f(d)?;
    for _ in 0..max_iter {
        if (b - a).abs() < tol * (1.0 + a.abs() + b.abs()) {
            break;
        }
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d)?;
        }
    }
    if fc < fd {
        Ok((c, fc))
    } else {
        Ok((d, fd))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn gauss_newton_solves_linear_least_squares() {
        // r(x) = A x - b with A 3x2.
        let a = array![[1.0, 0.0], [0.0, 2.0], [1.0, 1.0]];
        let b = array![1.0, 2.0, 2.5];
        let res = gauss_newton(
            &array![0.0, 0.0],
            |x| Ok(a.dot(x) - &b),
            |_| Ok(a.clone()),
            100,
        )
        .unwrap();
        // Normal equations oracle.
        let ata = a.t().dot(&a);
        let atb = a.t().dot(&b);
        let expect = crate::linalg::solve_spd(&ata, &atb).unwrap();
        assert_abs_diff_eq!(res.x[0], expect[0], epsilon = 1e-9);
        assert_abs_diff_eq!(res.x[1], expect[1], epsilon = 1e-9);
        assert!(res.converged);
    }

    #[test]
    fn gauss_newton_on_rosenbrock_residuals() {
        // Rosenbrock as least squares: r = [10(y - x^2), 1 - x].
        let res = gauss_newton(
            &array![-1.2, 1.0],
            |x| Ok(array![10.0 * (x[1] - x[0] * x[0]), 1.0 - x[0]]),
            |x| Ok(array![[-20.0 * x[0], 10.0], [-1.0, 0.0]]),
            200,
        )
        .unwrap();
        assert_abs_diff_eq!(res.x[0], 1.0, epsilon = 1e-7);
        assert_abs_diff_eq!(res.x[1], 1.0, epsilon = 1e-7);
    }

    #[test]
    fn nelder_mead_minimizes_quadratic() {
        let res = nelder_mead(
            &array![3.0, -4.0],
            0.5,
            |x| Ok((x[0] - 1.0).powi(2) + 2.0 * (x[1] + 2.0).powi(2)),
            1e-14,
            5000,
        )
        .unwrap();
        assert_abs_diff_eq!(res.x[0], 1.0, epsilon = 1e-5);
        assert_abs_diff_eq!(res.x[1], -2.0, epsilon = 1e-5);
    }

    #[test]
    fn golden_section_finds_minimum() {
        let (x, _) = golden_section(|t| Ok((t - 0.7).powi(2)), -2.0, 3.0, 1e-10, 200).unwrap();
        assert_abs_diff_eq!(x, 0.7, epsilon = 1e-6);
    }
}
