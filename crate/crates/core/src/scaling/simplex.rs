//! Nelder-Mead simplex minimization with adaptive coefficients.

use alloc::vec;
use alloc::vec::Vec;

#[derive(Debug, Clone, Copy)]
pub(crate) struct SimplexOptions {
    pub max_evals: usize,
    /// Stop once the spread of objective values across the simplex (and
    /// its extent in every coordinate) falls below these.
    pub f_tol: f64,
    pub x_tol: f64,
    pub initial_step: f64,
}

#[derive(Debug, Clone)]
pub(crate) struct SimplexResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub evals: usize,
}

pub(crate) fn minimize(f: &mut impl FnMut(&[f64]) -> f64, x0: &[f64], opt: &SimplexOptions) -> SimplexResult {
    let n = x0.len();
    if n == 0 {
        let v = f(x0);
        return SimplexResult { x: Vec::new(), f: v, evals: 1 };
    }
    let dim = n as f64;
    // Gao-Han coefficients keep the method effective in higher dimensions.
    let (alpha, beta, gamma, delta) = (1.0, 1.0 + 2.0 / dim, 0.75 - 1.0 / (2.0 * dim), 1.0 - 1.0 / dim);
    let mut pts: Vec<Vec<f64>> = vec![x0.to_vec()];
    for i in 0..n {
        let mut p = x0.to_vec();
        p[i] += opt.initial_step;
        pts.push(p);
    }
    let mut evals = 0;
    let mut eval = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        let v = f(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };
    let mut vals: Vec<f64> = pts.iter().map(|p| eval(p, &mut evals)).collect();
    let mut order: Vec<usize> = (0..=n).collect();
    while evals < opt.max_evals {
        order.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
        let (best, worst, second) = (order[0], order[n], order[n - 1]);
        let spread = vals[worst] - vals[best];
        let extent = (0..n).fold(0.0f64, |m, k| {
            let (lo, hi) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p[k]), hi.max(p[k])));
            m.max(hi - lo)
        });
        if spread.is_finite() && spread <= opt.f_tol && extent <= opt.x_tol {
            break;
        }
        let mut centroid = vec![0.0; n];
        for &i in &order[..n] {
            for (c, v) in centroid.iter_mut().zip(&pts[i]) {
                *c += v / dim;
            }
        }
        let along = |t: f64| -> Vec<f64> { centroid.iter().zip(&pts[worst]).map(|(c, w)| c + t * (c - w)).collect() };
        let xr = along(alpha);
        let fr = eval(&xr, &mut evals);
        if fr < vals[best] {
            let xe = along(alpha * beta);
            let fe = eval(&xe, &mut evals);
            if fe < fr {
                pts[worst] = xe;
                vals[worst] = fe;
            } else {
                pts[worst] = xr;
                vals[worst] = fr;
            }
            continue;
        }
        if fr < vals[second] {
            pts[worst] = xr;
            vals[worst] = fr;
            continue;
        }
        let (xc, fc) = if fr < vals[worst] {
            let xc = along(alpha * gamma);
            let fc = eval(&xc, &mut evals);
            (xc, if fc <= fr { fc } else { f64::INFINITY })
        } else {
            let xc = along(-gamma);
            let fc = eval(&xc, &mut evals);
            (xc, if fc < vals[worst] { fc } else { f64::INFINITY })
        };
        if fc.is_finite() {
            pts[worst] = xc;
            vals[worst] = fc;
            continue;
        }
        let xb = pts[best].clone();
        for &i in &order[1..] {
            for (p, b) in pts[i].iter_mut().zip(&xb) {
                *p = b + delta * (*p - b);
            }
            vals[i] = eval(&pts[i], &mut evals);
        }
    }
    let best = (0..=n).min_by(|&a, &b| vals[a].total_cmp(&vals[b])).unwrap_or(0);
    SimplexResult {
        x: pts[best].clone(),
        f: vals[best],
        evals,
    }
}

/// Repeats [`minimize`] from its own optimum with a fresh simplex until a
/// restart stops improving; this shakes off premature collapse.
pub(crate) fn minimize_restarting(
    f: &mut impl FnMut(&[f64]) -> f64,
    x0: &[f64],
    opt: &SimplexOptions,
    restarts: usize,
) -> SimplexResult {
    let mut r = minimize(f, x0, opt);
    let mut step = opt.initial_step;
    for _ in 0..restarts {
        step = (step * 0.5).max(1e-6);
        let next = minimize(f, &r.x, &SimplexOptions { initial_step: step, ..*opt });
        let evals = r.evals + next.evals;
        let improved = next.f < r.f;
        if improved {
            r = SimplexResult { evals, ..next };
        } else {
            r.evals = evals;
            break;
        }
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_rosenbrock() {
        let mut f = |x: &[f64]| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2);
        let opt = SimplexOptions {
            max_evals: 20_000,
            f_tol: 1e-20,
            x_tol: 1e-12,
            initial_step: 0.5,
        };
        let r = minimize_restarting(&mut f, &[-1.2, 1.0], &opt, 5);
        assert!((r.x[0] - 1.0).abs() < 1e-6 && (r.x[1] - 1.0).abs() < 1e-6, "{:?}", r.x);
    }

    #[test]
    fn quadratic_in_six_dimensions() {
        let target = [0.3, -1.0, 2.0, 0.5, 0.0, 4.0];
        let mut f = |x: &[f64]| x.iter().zip(&target).enumerate().map(|(i, (a, b))| (i + 1) as f64 * (a - b) * (a - b)).sum();
        let opt = SimplexOptions {
            max_evals: 50_000,
            f_tol: 1e-24,
            x_tol: 1e-12,
            initial_step: 1.0,
        };
        let r = minimize_restarting(&mut f, &[0.0; 6], &opt, 5);
        for (a, b) in r.x.iter().zip(&target) {
            assert!((a - b).abs() < 1e-8);
        }
    }
}
