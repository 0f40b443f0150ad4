//! Precision-aware scaling law
//!
//! `L = (A / (N eff_N(P_fwd))^alpha + B / (D eff_D(P_bwd))^beta)^gamma + E`
//!
//! with a two-stage Huber fit, the weighted-harmonic training speedup and
//! the effective loss under a compute budget, and argmin-precision grids.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::{Error, Result};

mod fit;
mod simplex;

pub use fit::{
    evaluate_fit, fit_alternative_forms, fit_stage1, fit_stage1_with, fit_stage2, FitForm, FitLoss, FitOptions, FitReport,
    BOUNDS_EXPONENT, BOUNDS_GAMMA,
    FormReport, RunRecord, Stage2Report, DEFAULT_HUBER_DELTA,
};

/// Identifier of a numeric precision, e.g. `fp8` or `fp4`.
pub type PrecisionId = String;

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingLawParams {
    pub a: f64,
    pub alpha: f64,
    pub b: f64,
    pub beta: f64,
    pub gamma: f64,
    pub e: f64,
    pub eff_n: BTreeMap<PrecisionId, f64>,
    pub eff_d: BTreeMap<PrecisionId, f64>,
    /// The reference precision; its efficiencies are exactly 1.
    pub baseline: PrecisionId,
}

impl ScalingLawParams {
    /// Coefficients fitted on the FP8 baseline with efficiencies only for
    /// the baseline itself.
    pub fn reference() -> Self {
        Self::with_core(1.52e5, 0.589, 5.25e5, 0.544, 0.274, 1.35, "fp8")
    }

    /// [`Self::reference`] plus the fitted MXFP4 end-to-end efficiencies
    /// (`eff_N = 0.65`, `eff_D = 0.95`) under the id `fp4`.
    pub fn reference_with_fp4() -> Self {
        let mut p = Self::reference();
        p.eff_n.insert("fp4".into(), 0.65);
        p.eff_d.insert("fp4".into(), 0.95);
        p
    }

    pub fn with_core(a: f64, alpha: f64, b: f64, beta: f64, gamma: f64, e: f64, baseline: &str) -> Self {
        let mut eff_n = BTreeMap::new();
        let mut eff_d = BTreeMap::new();
        eff_n.insert(baseline.to_string(), 1.0);
        eff_d.insert(baseline.to_string(), 1.0);
        Self {
            a,
            alpha,
            b,
            beta,
            gamma,
            e,
            eff_n,
            eff_d,
            baseline: baseline.into(),
        }
    }

    pub fn core(&self) -> [f64; 6] {
        [self.a, self.alpha, self.b, self.beta, self.gamma, self.e]
    }

    pub fn validate(&self) -> Result<()> {
        if !self.core().iter().all(|v| v.is_finite() && *v > 0.0) {
            return Err(Error::NonPositive("scaling-law coefficients"));
        }
        for (id, &v) in self.eff_n.iter().chain(self.eff_d.iter()) {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::InvalidConfig(alloc::format!("efficiency for `{id}` is {v}, outside (0, 1]")));
            }
        }
        for m in [&self.eff_n, &self.eff_d] {
            if m.get(&self.baseline) != Some(&1.0) {
                return Err(Error::InvalidConfig("baseline efficiency must be exactly 1".into()));
            }
        }
        Ok(())
    }

    pub fn eff_n(&self, p: &str) -> Result<f64> {
        self.eff_n.get(p).copied().ok_or_else(|| Error::UnknownPrecision(p.into()))
    }

    pub fn eff_d(&self, p: &str) -> Result<f64> {
        self.eff_d.get(p).copied().ok_or_else(|| Error::UnknownPrecision(p.into()))
    }

    /// Loss at effective sizes `n_eff = N eff_N`, `d_eff = D eff_D`.
    pub fn eval_effective(&self, n_eff: f64, d_eff: f64) -> f64 {
        let t = self.a / libm::pow(n_eff, self.alpha) + self.b / libm::pow(d_eff, self.beta);
        libm::pow(t, self.gamma) + self.e
    }
}

pub fn eval_loss(params: &ScalingLawParams, n: f64, d: f64, p_fwd: &str, p_bwd: &str) -> Result<f64> {
    if !(n > 0.0) || !(d > 0.0) {
        return Err(Error::NonPositive("N and D"));
    }
    Ok(params.eval_effective(n * params.eff_n(p_fwd)?, d * params.eff_d(p_bwd)?))
}

/// Training speedup from forward and backward speedups: the harmonic mean
/// weighted 1/3 forward, 2/3 backward (the backward pass does two GEMMs).
pub fn training_speedup(s_fwd: f64, s_bwd: f64) -> Result<f64> {
    if !(s_fwd > 0.0) || !(s_bwd > 0.0) {
        return Err(Error::NonPositive("speedups"));
    }
    // Same as 1 / ((1/3)/s_fwd + (2/3)/s_bwd), arranged so that small
    // integer speedups give the correctly rounded result.
    Ok(3.0 * s_fwd * s_bwd / (s_bwd + 2.0 * s_fwd))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Speedup {
    pub s_fwd: f64,
    pub s_bwd: f64,
}

impl Speedup {
    pub fn training(&self) -> Result<f64> {
        training_speedup(self.s_fwd, self.s_bwd)
    }
}

/// Speedups per `(P_fwd, P_bwd)` pair relative to the baseline pair.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeedupTable {
    pub entries: BTreeMap<(PrecisionId, PrecisionId), Speedup>,
}

impl SpeedupTable {
    /// Bit-operations model relative to FP8: halving the bit-width of a
    /// pass doubles its speed.
    pub fn bops() -> Self {
        let mut t = Self { entries: BTreeMap::new() };
        t.insert("fp8", "fp8", 1.0, 1.0);
        t.insert("fp4", "fp8", 2.0, 1.0);
        t.insert("fp8", "fp4", 1.0, 2.0);
        t.insert("fp4", "fp4", 2.0, 2.0);
        t
    }

    pub fn insert(&mut self, p_fwd: &str, p_bwd: &str, s_fwd: f64, s_bwd: f64) {
        self.entries.insert((p_fwd.into(), p_bwd.into()), Speedup { s_fwd, s_bwd });
    }

    pub fn get(&self, p_fwd: &str, p_bwd: &str) -> Result<Speedup> {
        self.entries
            .get(&(p_fwd.to_string(), p_bwd.to_string()))
            .copied()
            .ok_or_else(|| Error::UnknownPrecision(alloc::format!("{p_fwd}:{p_bwd}")))
    }

    pub fn pairs(&self) -> Vec<(PrecisionId, PrecisionId)> {
        self.entries.keys().cloned().collect()
    }
}

/// Loss reachable with forward budget `n_max` and training budget
/// `n_max * d_max` once the speedups are spent on a larger model and more
/// data: `L(n_max s_fwd, d_max s_train / s_fwd)`.
pub fn effective_loss(
    params: &ScalingLawParams,
    speedups: &SpeedupTable,
    n_max: f64,
    d_max: f64,
    p_fwd: &str,
    p_bwd: &str,
) -> Result<f64> {
    let s = speedups.get(p_fwd, p_bwd)?;
    let s_tr = s.training()?;
    eval_loss(params, n_max * s.s_fwd, d_max * s_tr / s.s_fwd, p_fwd, p_bwd)
}

/// Bit-width parsed from the trailing digits of an id (`fp4` -> 4);
/// ids without digits sort last.
pub fn bit_width(id: &str) -> u32 {
    let digits: String = id.chars().rev().take_while(|c| c.is_ascii_digit()).collect::<Vec<_>>().into_iter().rev().collect();
    digits.parse().unwrap_or(u32::MAX)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionCell {
    pub n_max: f64,
    pub budget: f64,
    pub best: (PrecisionId, PrecisionId),
    pub loss: f64,
}

/// For each `(n_max, budget)` cell, the precision pair with the lowest
/// [`effective_loss`], `budget` being `D_max`. Ties go to the lower total
/// bit-width, then lexicographically. Cells are row-major over `n_grid`.
pub fn optimal_region_grid(
    params: &ScalingLawParams,
    speedups: &SpeedupTable,
    precisions: &[(PrecisionId, PrecisionId)],
    n_grid: &[f64],
    budget_grid: &[f64],
) -> Result<Vec<RegionCell>> {
    if precisions.is_empty() || n_grid.is_empty() || budget_grid.is_empty() {
        return Err(Error::InsufficientData("region grid needs precisions and both axes".into()));
    }
    let mut ranked: Vec<&(PrecisionId, PrecisionId)> = precisions.iter().collect();
    ranked.sort_by(|x, y| {
        (bit_width(&x.0).saturating_add(bit_width(&x.1)), x).cmp(&(bit_width(&y.0).saturating_add(bit_width(&y.1)), y))
    });
    let mut cells = Vec::with_capacity(n_grid.len() * budget_grid.len());
    for &n in n_grid {
        for &d in budget_grid {
            let mut best: Option<(&(PrecisionId, PrecisionId), f64)> = None;
            for p in &ranked {
                let l = effective_loss(params, speedups, n, d, &p.0, &p.1)?;
                // Strict improvement only, so earlier (preferred) pairs win ties.
                if best.map_or(true, |(_, b)| l < b) {
                    best = Some((p, l));
                }
            }
            let (p, loss) = best.expect("non-empty precision set");
            cells.push(RegionCell {
                n_max: n,
                budget: d,
                best: p.clone(),
                loss,
            });
        }
    }
    Ok(cells)
}

/// `D_max` in `[lo, hi]` where pairs `a` and `b` reach equal effective loss
/// at `n_max`, by bisection in `log D`. `None` if the sign of the loss
/// difference does not change over the bracket.
pub fn crossover_budget(
    params: &ScalingLawParams,
    speedups: &SpeedupTable,
    n_max: f64,
    a: (&str, &str),
    b: (&str, &str),
    lo: f64,
    hi: f64,
) -> Result<Option<f64>> {
    let diff = |d: f64| -> Result<f64> {
        Ok(effective_loss(params, speedups, n_max, d, a.0, a.1)? - effective_loss(params, speedups, n_max, d, b.0, b.1)?)
    };
    let (mut l, mut h) = (libm::log(lo), libm::log(hi));
    let (mut fl, fh) = (diff(lo)?, diff(hi)?);
    if fl == 0.0 {
        return Ok(Some(lo));
    }
    if fl.signum() == fh.signum() {
        return Ok(None);
    }
    for _ in 0..200 {
        let m = 0.5 * (l + h);
        let fm = diff(libm::exp(m))?;
        if fm == 0.0 {
            return Ok(Some(libm::exp(m)));
        }
        if fm.signum() == fl.signum() {
            l = m;
            fl = fm;
        } else {
            h = m;
        }
        if h - l < 1e-13 {
            break;
        }
    }
    Ok(Some(libm::exp(0.5 * (l + h))))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn speedup_rows() {
        assert_eq!(training_speedup(2.0, 1.0).unwrap(), 1.2);
        assert_eq!(training_speedup(1.0, 2.0).unwrap(), 1.5);
        assert_eq!(training_speedup(2.0, 2.0).unwrap(), 2.0);
        assert!(training_speedup(0.0, 1.0).is_err());
        assert!(training_speedup(1.0, -1.0).is_err());
    }

    #[test]
    fn baseline_speedup_reduces_to_plain_loss() {
        let p = ScalingLawParams::reference_with_fp4();
        let t = SpeedupTable::bops();
        assert_eq!(
            effective_loss(&p, &t, 3e7, 3e9, "fp8", "fp8").unwrap(),
            eval_loss(&p, 3e7, 3e9, "fp8", "fp8").unwrap()
        );
    }

    #[test]
    fn validation_and_unknown_ids() {
        let mut p = ScalingLawParams::reference();
        assert!(p.validate().is_ok());
        assert!(matches!(eval_loss(&p, 1e8, 1e10, "fp4", "fp8"), Err(Error::UnknownPrecision(_))));
        p.eff_n.insert("fp4".into(), 1.2);
        assert!(p.validate().is_err());
        assert!(eval_loss(&ScalingLawParams::reference(), 0.0, 1.0, "fp8", "fp8").is_err());
    }

    #[test]
    fn bit_widths() {
        assert_eq!(bit_width("fp4"), 4);
        assert_eq!(bit_width("bf16"), 16);
        assert_eq!(bit_width("int8"), 8);
        assert_eq!(bit_width("exact"), u32::MAX);
    }

    #[test]
    fn single_precision_grid_is_uniform() {
        let p = ScalingLawParams::reference_with_fp4();
        let pairs = [("fp4".to_string(), "fp4".to_string())];
        let cells = optimal_region_grid(&p, &SpeedupTable::bops(), &pairs, &[1e7, 1e9], &[1e9, 1e12]).unwrap();
        assert_eq!(cells.len(), 4);
        assert!(cells.iter().all(|c| c.best == pairs[0]));
    }

    #[test]
    fn ties_prefer_fewer_bits() {
        // Identical speedups and efficiencies make every pair tie.
        let mut p = ScalingLawParams::reference();
        p.eff_n.insert("fp4".into(), 1.0);
        p.eff_d.insert("fp4".into(), 1.0);
        let mut t = SpeedupTable { entries: BTreeMap::new() };
        for (f, b) in [("fp8", "fp8"), ("fp4", "fp8"), ("fp8", "fp4"), ("fp4", "fp4")] {
            t.insert(f, b, 1.0, 1.0);
        }
        let cells = optimal_region_grid(&p, &t, &t.pairs(), &[1e8], &[1e10]).unwrap();
        assert_eq!(cells[0].best, ("fp4".to_string(), "fp4".to_string()));
        let mixed = [("fp8".to_string(), "fp4".to_string()), ("fp4".to_string(), "fp8".to_string())];
        let cells = optimal_region_grid(&p, &t, &mixed, &[1e8], &[1e10]).unwrap();
        assert_eq!(cells[0].best, mixed[1]);
    }
}
