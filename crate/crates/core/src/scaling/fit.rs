use alloc::collections::BTreeSet;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use super::simplex::{minimize, minimize_restarting, SimplexOptions};
use super::{eval_loss, PrecisionId, ScalingLawParams};
use crate::{Error, Result};

pub const DEFAULT_HUBER_DELTA: f64 = 1e-4;

/// One observed training run. `n` counts non-embedding parameters and `d`
/// training tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub n: f64,
    pub d: f64,
    pub p_fwd: PrecisionId,
    pub p_bwd: PrecisionId,
    pub loss: f64,
}

impl RunRecord {
    pub fn new(n: f64, d: f64, p_fwd: &str, p_bwd: &str, loss: f64) -> Self {
        Self {
            n,
            d,
            p_fwd: p_fwd.into(),
            p_bwd: p_bwd.into(),
            loss,
        }
    }
}

/// Penalty on `log L_pred - log L_obs`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FitLoss {
    Huber { delta: f64 },
    /// Half squared residual.
    Squared,
}

impl Default for FitLoss {
    fn default() -> Self {
        FitLoss::Huber { delta: DEFAULT_HUBER_DELTA }
    }
}

impl FitLoss {
    pub fn penalty(&self, r: f64) -> f64 {
        match *self {
            FitLoss::Squared => 0.5 * r * r,
            FitLoss::Huber { delta } => {
                let a = libm::fabs(r);
                if a <= delta {
                    0.5 * r * r
                } else {
                    delta * (a - 0.5 * delta)
                }
            }
        }
    }
}

/// Which of `(A, alpha, B, beta, gamma, E)` are held fixed, and at what.
#[derive(Debug, Clone, PartialEq)]
pub struct FitForm {
    pub name: String,
    pub fixed: [Option<f64>; 6],
}

impl FitForm {
    pub fn full() -> Self {
        Self {
            name: "full".into(),
            fixed: [None; 6],
        }
    }

    pub fn gamma_one() -> Self {
        let mut f = Self::full();
        f.name = "gamma=1".into();
        f.fixed[4] = Some(1.0);
        f
    }

    pub fn beta_one() -> Self {
        let mut f = Self::full();
        f.name = "beta=1".into();
        f.fixed[3] = Some(1.0);
        f
    }

    fn free(&self) -> Vec<usize> {
        (0..6).filter(|&i| self.fixed[i].is_none()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub loss: FitLoss,
    pub form: FitForm,
    /// Simplex evaluations per start on the coarse pass.
    pub coarse_evals: usize,
    /// Number of best coarse starts that get polished.
    pub polish: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            loss: FitLoss::default(),
            form: FitForm::full(),
            coarse_evals: 1500,
            polish: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub params: ScalingLawParams,
    pub objective: f64,
    /// `log L_pred - log L_obs` per record, in input order.
    pub residuals: Vec<f64>,
    pub starts: usize,
    pub evaluations: usize,
}

/// Objective value and per-record log residuals of `params` on `records`.
pub fn evaluate_fit(params: &ScalingLawParams, records: &[RunRecord], loss: FitLoss) -> Result<(f64, Vec<f64>)> {
    let mut residuals = Vec::with_capacity(records.len());
    let mut total = 0.0;
    for r in records {
        let pred = eval_loss(params, r.n, r.d, &r.p_fwd, &r.p_bwd)?;
        let res = libm::log(pred) - libm::log(r.loss);
        total += loss.penalty(res);
        residuals.push(res);
    }
    Ok((total, residuals))
}

fn check_records(records: &[RunRecord]) -> Result<()> {
    for (i, r) in records.iter().enumerate() {
        if !(r.n > 0.0 && r.d > 0.0 && r.loss > 0.0) || !(r.n.is_finite() && r.d.is_finite() && r.loss.is_finite()) {
            return Err(Error::InvalidConfig(alloc::format!("record {i}: n, d and loss must be positive and finite")));
        }
    }
    Ok(())
}

fn geometric_mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, k) = v.fold((0.0, 0usize), |(s, k), x| (s + libm::log(x), k + 1));
    libm::exp(s / k as f64)
}

/// Range of `alpha` and `beta` allowed during stage 1.
pub const BOUNDS_EXPONENT: (f64, f64) = (0.05, 2.0);
/// Range of `gamma` allowed during stage 1.
pub const BOUNDS_GAMMA: (f64, f64) = (0.05, 5.0);

/// Stage 1 with the default Huber objective and the full six-parameter
/// form.
pub fn fit_stage1(records: &[RunRecord]) -> Result<FitReport> {
    fit_stage1_with(records, &FitOptions::default())
}

/// Fits `(A, alpha, B, beta, gamma, E)` on baseline-precision records.
/// Free parameters are optimized in log space from a deterministic grid of
/// three values per parameter; the best starts are then polished.
pub fn fit_stage1_with(records: &[RunRecord], opts: &FitOptions) -> Result<FitReport> {
    check_records(records)?;
    let ns: BTreeSet<u64> = records.iter().map(|r| r.n.to_bits()).collect();
    let ds: BTreeSet<u64> = records.iter().map(|r| r.d.to_bits()).collect();
    if records.len() < 6 || ns.len() < 2 || ds.len() < 2 {
        return Err(Error::InsufficientData(
            "stage 1 needs at least 6 records spanning two or more N and D values".into(),
        ));
    }
    let baseline = records[0].p_fwd.clone();
    if records.iter().any(|r| r.p_fwd != baseline || r.p_bwd != baseline) {
        return Err(Error::InvalidConfig(alloc::format!(
            "stage 1 records must all use the baseline precision `{baseline}` for both passes"
        )));
    }
    let free = opts.form.free();
    let fixed = opts.form.fixed;
    let logs: Vec<(f64, f64, f64)> = records.iter().map(|r| (r.n, r.d, libm::log(r.loss))).collect();
    let l_min = records.iter().map(|r| r.loss).fold(f64::INFINITY, f64::min);
    let l_max = records.iter().map(|r| r.loss).fold(0.0, f64::max);
    // Box on the free parameters. Without it squared loss can slide into the
    // degenerate E -> 0, exponents -> 0, gamma -> inf corner, where the law
    // mimics a logarithm and E underflows.
    let bounds = [
        (1e-6, 1e40),
        (BOUNDS_EXPONENT.0, BOUNDS_EXPONENT.1),
        (1e-6, 1e40),
        (BOUNDS_EXPONENT.0, BOUNDS_EXPONENT.1),
        (BOUNDS_GAMMA.0, BOUNDS_GAMMA.1),
        (1e-3 * l_min, l_max),
    ];
    let unpack = |theta: &[f64]| -> [f64; 6] {
        let mut p = [0.0; 6];
        for i in 0..6 {
            p[i] = fixed[i].unwrap_or(0.0);
        }
        for (k, &i) in free.iter().enumerate() {
            p[i] = libm::exp(theta[k]).clamp(bounds[i].0, bounds[i].1);
        }
        p
    };
    let loss = opts.loss;
    let mut objective = |theta: &[f64]| -> f64 {
        let [a, alpha, b, beta, gamma, e] = unpack(theta);
        let mut total = 0.0;
        for &(n, d, log_obs) in &logs {
            let t = a / libm::pow(n, alpha) + b / libm::pow(d, beta);
            let pred = libm::pow(t, gamma) + e;
            let r = libm::log(pred) - log_obs;
            total += loss.penalty(r);
        }
        if total.is_finite() {
            total
        } else {
            f64::INFINITY
        }
    };

    // Start grid. A and B are tied to the exponent being tried so that each
    // term starts at order one on the observed range.
    let n_g = geometric_mean(records.iter().map(|r| r.n));
    let d_g = geometric_mean(records.iter().map(|r| r.d));
    let exps = [0.25, 0.5, 0.8];
    let coefs = [0.3, 3.0, 30.0];
    let gammas = [0.2, 0.5, 1.0];
    let e_fracs = [0.3, 0.6, 0.9];
    let mut starts: Vec<Vec<f64>> = Vec::new();
    for idx in 0..729usize {
        let digit = |k: usize| (idx / 3usize.pow(k as u32)) % 3;
        let alpha = fixed[1].unwrap_or(exps[digit(1)]);
        let beta = fixed[3].unwrap_or(exps[digit(3)]);
        let full = [
            coefs[digit(0)] * libm::pow(n_g, alpha),
            alpha,
            coefs[digit(2)] * libm::pow(d_g, beta),
            beta,
            gammas[digit(4)],
            e_fracs[digit(5)] * l_min,
        ];
        // Only enumerate digits of free parameters; skip duplicates.
        if (0..6).any(|k| fixed[k].is_some() && digit(k) != 0) {
            continue;
        }
        starts.push(free.iter().map(|&i| libm::log(full[i])).collect());
    }

    let coarse = SimplexOptions {
        max_evals: opts.coarse_evals,
        f_tol: 1e-30,
        x_tol: 1e-10,
        initial_step: 0.3,
    };
    let mut evaluations = 0;
    let mut results: Vec<(usize, Vec<f64>, f64)> = Vec::with_capacity(starts.len());
    for (i, s) in starts.iter().enumerate() {
        let r = minimize(&mut objective, s, &coarse);
        evaluations += r.evals;
        if r.f.is_finite() {
            results.push((i, r.x, r.f));
        }
    }
    if results.is_empty() {
        return Err(Error::FitFailed);
    }
    // Ordered by objective, then start index, so the choice is deterministic.
    results.sort_by(|a, b| a.2.total_cmp(&b.2).then(a.0.cmp(&b.0)));
    let fine = SimplexOptions {
        max_evals: 40_000,
        f_tol: 1e-30,
        x_tol: 1e-13,
        initial_step: 0.05,
    };
    let mut best: Option<(Vec<f64>, f64)> = None;
    for (_, x, _) in results.iter().take(opts.polish.max(1)) {
        let r = minimize_restarting(&mut objective, x, &fine, 8);
        evaluations += r.evals;
        if best.as_ref().map_or(true, |b| r.f < b.1) {
            best = Some((r.x, r.f));
        }
    }
    let (theta, _) = best.ok_or(Error::FitFailed)?;
    let [a, alpha, b, beta, gamma, e] = unpack(&theta);
    let params = ScalingLawParams::with_core(a, alpha, b, beta, gamma, e, &baseline);
    if params.validate().is_err() {
        return Err(Error::FitFailed);
    }
    let (objective, residuals) = evaluate_fit(&params, records, loss)?;
    Ok(FitReport {
        params,
        objective,
        residuals,
        starts: starts.len(),
        evaluations,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage2Report {
    pub params: ScalingLawParams,
    pub objective: f64,
    pub residuals: Vec<f64>,
}

#[inline]
fn squash(z: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-z))
}

/// With the core coefficients of `stage1` frozen, fits `eff_N` for every
/// non-baseline forward id and `eff_D` for every non-baseline backward id
/// jointly over all records. Efficiencies pass through a logistic squash
/// so they stay in `(0, 1]`.
pub fn fit_stage2(stage1: &ScalingLawParams, records: &[RunRecord], loss: FitLoss) -> Result<Stage2Report> {
    check_records(records)?;
    stage1.validate()?;
    if records.is_empty() {
        return Err(Error::InsufficientData("stage 2 needs records".into()));
    }
    let base = &stage1.baseline;
    let fwd_ids: BTreeSet<&str> = records.iter().map(|r| r.p_fwd.as_str()).filter(|p| *p != base).collect();
    let bwd_ids: BTreeSet<&str> = records.iter().map(|r| r.p_bwd.as_str()).filter(|p| *p != base).collect();
    let fwd_ids: Vec<&str> = fwd_ids.into_iter().collect();
    let bwd_ids: Vec<&str> = bwd_ids.into_iter().collect();
    let k = fwd_ids.len() + bwd_ids.len();
    // Per record: index of its free eff_N / eff_D (None = baseline, fixed 1).
    let slots: Vec<(Option<usize>, Option<usize>)> = records
        .iter()
        .map(|r| {
            (
                fwd_ids.iter().position(|p| *p == r.p_fwd),
                bwd_ids.iter().position(|p| *p == r.p_bwd).map(|j| fwd_ids.len() + j),
            )
        })
        .collect();
    let mut objective = |z: &[f64]| -> f64 {
        let mut total = 0.0;
        for (r, &(sn, sd)) in records.iter().zip(&slots) {
            let en = sn.map_or(1.0, |i| squash(z[i]));
            let ed = sd.map_or(1.0, |i| squash(z[i]));
            let pred = stage1.eval_effective(r.n * en, r.d * ed);
            total += loss.penalty(libm::log(pred) - libm::log(r.loss));
        }
        if total.is_finite() {
            total
        } else {
            f64::INFINITY
        }
    };
    let levels = [-1.0, 1.0, 3.0];
    let starts: Vec<Vec<f64>> = if k <= 5 {
        (0..3usize.pow(k as u32))
            .map(|idx| (0..k).map(|j| levels[(idx / 3usize.pow(j as u32)) % 3]).collect())
            .collect()
    } else {
        levels.iter().map(|&l| vec![l; k]).collect()
    };
    let coarse = SimplexOptions {
        max_evals: 400 * (k + 1),
        f_tol: 1e-30,
        x_tol: 1e-10,
        initial_step: 0.5,
    };
    let mut best: Option<(usize, Vec<f64>, f64)> = None;
    for (i, s) in starts.iter().enumerate() {
        let r = minimize(&mut objective, s, &coarse);
        if best.as_ref().map_or(true, |b| r.f < b.2) {
            best = Some((i, r.x, r.f));
        }
    }
    let (_, z0, _) = best.ok_or(Error::FitFailed)?;
    let fine = SimplexOptions {
        max_evals: 20_000,
        f_tol: 1e-30,
        x_tol: 1e-12,
        initial_step: 0.1,
    };
    let z = minimize_restarting(&mut objective, &z0, &fine, 8).x;
    let mut params = stage1.clone();
    for (j, p) in fwd_ids.iter().enumerate() {
        params.eff_n.insert(p.to_string(), squash(z[j]));
    }
    for (j, p) in bwd_ids.iter().enumerate() {
        params.eff_d.insert(p.to_string(), squash(z[fwd_ids.len() + j]));
    }
    let (objective, residuals) = evaluate_fit(&params, records, loss)?;
    if !objective.is_finite() {
        return Err(Error::FitFailed);
    }
    Ok(Stage2Report {
        params,
        objective,
        residuals,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FormReport {
    pub form: String,
    pub params: ScalingLawParams,
    pub objective: f64,
}

/// Stage 1 under each form, for comparing how much a constraint costs.
pub fn fit_alternative_forms(records: &[RunRecord], forms: &[FitForm], loss: FitLoss) -> Result<Vec<FormReport>> {
    forms
        .iter()
        .map(|form| {
            let r = fit_stage1_with(
                records,
                &FitOptions {
                    loss,
                    form: form.clone(),
                    ..FitOptions::default()
                },
            )?;
            Ok(FormReport {
                form: form.name.clone(),
                params: r.params,
                objective: r.objective,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(params: &ScalingLawParams) -> Vec<RunRecord> {
        let mut v = Vec::new();
        for n in [3e7, 5e7, 1e8, 2e8] {
            for ratio in [25.0, 50.0, 100.0, 200.0, 400.0, 800.0] {
                let p = &params.baseline;
                v.push(RunRecord::new(n, n * ratio, p, p, eval_loss(params, n, n * ratio, p, p).unwrap()));
            }
        }
        v
    }

    #[test]
    fn huber_penalty() {
        let h = FitLoss::Huber { delta: 1.0 };
        assert_eq!(h.penalty(0.5), 0.125);
        assert_eq!(h.penalty(-3.0), 2.5);
        assert_eq!(FitLoss::Squared.penalty(-3.0), 4.5);
    }

    #[test]
    fn reference_params_have_zero_residuals() {
        let p = ScalingLawParams::reference();
        let (obj, res) = evaluate_fit(&p, &grid(&p), FitLoss::default()).unwrap();
        assert_eq!(obj, 0.0);
        assert!(res.iter().all(|&r| r == 0.0));
    }

    #[test]
    fn insufficient_or_mixed_records() {
        let p = ScalingLawParams::reference();
        let recs = grid(&p);
        assert!(matches!(fit_stage1(&recs[..5]), Err(Error::InsufficientData(_))));
        let same_n: Vec<_> = recs.iter().filter(|r| r.n == 3e7).cloned().collect();
        assert!(matches!(fit_stage1(&same_n), Err(Error::InsufficientData(_))));
        let mut mixed = recs.clone();
        mixed[3].p_bwd = "fp4".into();
        assert!(fit_stage1(&mixed).is_err());
    }

    #[test]
    fn stage2_on_baseline_records_keeps_unit_efficiency() {
        let p = ScalingLawParams::reference();
        let r = fit_stage2(&p, &grid(&p), FitLoss::default()).unwrap();
        assert_eq!(r.params.eff_n, p.eff_n);
        assert_eq!(r.params.eff_d, p.eff_d);
        assert_eq!(r.objective, 0.0);
    }
}
