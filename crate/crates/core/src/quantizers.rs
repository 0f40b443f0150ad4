//! Group quantizers onto MXFP4.
//!
//! None of these apply a Hadamard transform; callers that want the
//! Hadamard-domain variant transform first.

use alloc::vec;
use alloc::vec::Vec;

use crate::mxfp4::{
    pow2, quantize_with_scales, rtn_magnitude, scale_for_absmax, QuantizedTensor, Rounding, E2M1_MAX,
    E8M0,
};
use crate::{Matrix, Result};

/// How QuEST searches for its per-group clipping scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ClipSearch {
    /// Try every E8M0 exponent from the AbsMax exponent down `octaves`
    /// steps and keep the one with the lowest squared error.
    Exponents { octaves: u32 },
    /// Search `candidates` real scales log-spaced so the clipping point runs
    /// from `min_ratio * absmax` up to `absmax`, then snap the best one to
    /// whichever neighbouring E8M0 exponent reconstructs better.
    LogGrid { candidates: u32, min_ratio: f64 },
}

impl Default for ClipSearch {
    fn default() -> Self {
        ClipSearch::Exponents { octaves: 4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct QuestParams {
    pub search: ClipSearch,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum QuantScheme {
    RtnAbsMax,
    SrAbsMax { seed: u64 },
    Quest(QuestParams),
}

impl QuantScheme {
    pub fn quest() -> Self {
        QuantScheme::Quest(QuestParams::default())
    }

    pub fn name(&self) -> &'static str {
        match self {
            QuantScheme::RtnAbsMax => "rtn",
            QuantScheme::SrAbsMax { .. } => "sr",
            QuantScheme::Quest(_) => "quest",
        }
    }

    /// Same scheme with its stochastic seed replaced (no-op for the others).
    pub fn reseeded(self, seed: u64) -> Self {
        match self {
            QuantScheme::SrAbsMax { .. } => QuantScheme::SrAbsMax { seed },
            other => other,
        }
    }

    pub fn quantize(&self, m: &Matrix) -> Result<(QuantizedTensor, ClipMask)> {
        match self {
            QuantScheme::RtnAbsMax => quantize_rtn_absmax(m),
            QuantScheme::SrAbsMax { seed } => quantize_sr_absmax(m, *seed),
            QuantScheme::Quest(p) => quantize_quest(m, p),
        }
    }
}

/// `true` where the scaled value was not clipped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClipMask {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl ClipMask {
    pub fn all_true(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            bits: vec![true; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, bits: Vec<bool>) -> Option<Self> {
        (bits.len() == rows * cols).then_some(Self { rows, cols, bits })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: bool) {
        self.bits[i * self.cols + j] = v;
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.bits
    }

    pub fn clipped_count(&self) -> usize {
        self.bits.iter().filter(|&&b| !b).count()
    }

    pub fn is_all_true(&self) -> bool {
        self.bits.iter().all(|&b| b)
    }

    /// Zeroes entries of `m` where the mask is false.
    pub fn apply(&self, m: &mut Matrix) {
        assert_eq!(m.shape(), (self.rows, self.cols));
        for (v, &keep) in m.as_mut_slice().iter_mut().zip(&self.bits) {
            if !keep {
                *v = 0.0;
            }
        }
    }
}

pub fn quantize_rtn_absmax(m: &Matrix) -> Result<(QuantizedTensor, ClipMask)> {
    let q = quantize_with_scales(m, |_, _, g| crate::mxfp4::absmax_scale(g), Rounding::Nearest)?;
    Ok((q, ClipMask::all_true(m.rows(), m.cols())))
}

pub fn quantize_sr_absmax(m: &Matrix, seed: u64) -> Result<(QuantizedTensor, ClipMask)> {
    let q = quantize_with_scales(
        m,
        |_, _, g| crate::mxfp4::absmax_scale(g),
        Rounding::Stochastic { seed },
    )?;
    Ok((q, ClipMask::all_true(m.rows(), m.cols())))
}

/// Squared reconstruction error of RTN-with-saturation at scale `2^exponent`.
pub fn group_error(group: &[f64], exponent: i32) -> f64 {
    let inv = pow2(-exponent);
    let s = pow2(exponent);
    group
        .iter()
        .map(|&x| {
            let q = rtn_magnitude(libm::fabs(x) * inv) * s;
            let d = libm::fabs(x) - q;
            d * d
        })
        .sum()
}

fn group_error_real(group: &[f64], scale: f64) -> f64 {
    group
        .iter()
        .map(|&x| {
            let q = rtn_magnitude(libm::fabs(x) / scale) * scale;
            let d = libm::fabs(x) - q;
            d * d
        })
        .sum()
}

/// The E8M0 scale QuEST picks for one group.
pub fn quest_scale(group: &[f64], params: &QuestParams) -> E8M0 {
    let absmax = group.iter().fold(0.0f64, |m, &x| m.max(libm::fabs(x)));
    let top = scale_for_absmax(absmax);
    if absmax == 0.0 {
        return top;
    }
    match params.search {
        ClipSearch::Exponents { octaves } => {
            let e0 = top.exponent();
            let mut best = (e0, group_error(group, e0));
            for k in 1..=octaves as i32 {
                let e = e0 - k;
                if e < E8M0::MIN_EXPONENT {
                    break;
                }
                let err = group_error(group, e);
                if err < best.1 {
                    best = (e, err);
                }
            }
            E8M0::from_exponent(best.0)
        }
        ClipSearch::LogGrid {
            candidates,
            min_ratio,
        } => {
            let n = candidates.max(2);
            let log_lo = libm::log(min_ratio);
            let mut best = (absmax / E2M1_MAX, f64::INFINITY);
            // Largest clipping point first so ties keep the wider range.
            for k in (0..n).rev() {
                let t = k as f64 / (n - 1) as f64;
                let clip = absmax * libm::exp(log_lo * (1.0 - t));
                let s = clip / E2M1_MAX;
                let err = group_error_real(group, s);
                if err < best.1 {
                    best = (s, err);
                }
            }
            let (_, k) = libm::frexp(best.0);
            // best.0 in [2^(k-1), 2^k)
            let lo = (k - 1).clamp(E8M0::MIN_EXPONENT, E8M0::MAX_EXPONENT);
            let hi = (lo + 1).min(E8M0::MAX_EXPONENT);
            if group_error(group, hi) <= group_error(group, lo) {
                E8M0::from_exponent(hi)
            } else {
                E8M0::from_exponent(lo)
            }
        }
    }
}

/// QuEST on Hadamard-domain input: per-group RMSE-optimal scale, RTN with
/// saturation, and a trust mask of un-clipped positions.
pub fn quantize_quest(m: &Matrix, params: &QuestParams) -> Result<(QuantizedTensor, ClipMask)> {
    let mut mask = ClipMask::all_true(m.rows(), m.cols());
    let q = quantize_with_scales(
        m,
        |i, g, group| {
            let s = quest_scale(group, params);
            let inv = s.reciprocal();
            for (k, &x) in group.iter().enumerate() {
                if libm::fabs(x * inv) > E2M1_MAX {
                    mask.set(i, g * crate::mxfp4::GROUP_SIZE + k, false);
                }
            }
            s
        },
        Rounding::Nearest,
    )?;
    Ok((q, mask))
}
