//! Quantization-quality measurements: per-element MSE on Gaussian data,
//! the projection-magnitude misalignment `1 - E[1/S]` with
//! `S = <x, x> / <Ĥx, Q(Ĥx)>`, and layerwise gradient alignment.
//!
//! Every Monte Carlo estimate carries its standard error. Sample `i` draws
//! from `CounterRng::new(seed).derive(&[i])`, so estimates do not depend on
//! evaluation order.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::hadamard::{self, DEFAULT_BLOCK};
use crate::mxfp4::{pow2, rtn_magnitude, scale_for_absmax, sr_index, E2M1_GRID, GROUP_SIZE};
use crate::qlinear::{BackwardRounding, LayerConfig};
use crate::quantizers::{quest_scale, QuestParams};
use crate::rng::{streams, CounterRng, IndexedUniforms};
use crate::trainkit::Model;
use crate::{Error, Matrix, Result};

pub const DEFAULT_DIM: usize = 4096;
pub const DEFAULT_SAMPLES: usize = 100_000;

/// Quantize-dequantize schemes that diagnostics can measure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DiagScheme {
    Identity,
    RtnAbsMax,
    SrAbsMax,
    Quest,
}

impl DiagScheme {
    pub const ALL: [DiagScheme; 4] = [
        DiagScheme::Identity,
        DiagScheme::RtnAbsMax,
        DiagScheme::SrAbsMax,
        DiagScheme::Quest,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DiagScheme::Identity => "identity",
            DiagScheme::RtnAbsMax => "rtn",
            DiagScheme::SrAbsMax => "sr",
            DiagScheme::Quest => "quest",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "identity" | "exact" => Ok(DiagScheme::Identity),
            "rtn" => Ok(DiagScheme::RtnAbsMax),
            "sr" => Ok(DiagScheme::SrAbsMax),
            "quest" => Ok(DiagScheme::Quest),
            other => Err(Error::InvalidConfig(alloc::format!("unknown scheme '{other}'"))),
        }
    }

    /// Writes `dequantize(quantize(x))` into `out`. `seed` keys stochastic
    /// rounding exactly as [`crate::quantizers::quantize_sr_absmax`] does
    /// for a single-row matrix.
    pub fn fake_quantize(self, x: &[f64], seed: u64, out: &mut [f64]) {
        debug_assert_eq!(x.len(), out.len());
        let mut uniforms = IndexedUniforms::new(CounterRng::new(seed), streams::STOCHASTIC_ROUNDING);
        let quest = QuestParams::default();
        for (g, (xs, os)) in x.chunks(GROUP_SIZE).zip(out.chunks_mut(GROUP_SIZE)).enumerate() {
            let scale = match self {
                DiagScheme::Identity => {
                    os.copy_from_slice(xs);
                    continue;
                }
                DiagScheme::RtnAbsMax | DiagScheme::SrAbsMax => {
                    let absmax = xs.iter().fold(0.0f64, |m, &v| m.max(libm::fabs(v)));
                    scale_for_absmax(absmax)
                }
                DiagScheme::Quest => quest_scale(xs, &quest),
            };
            let (s, inv) = (pow2(scale.exponent()), pow2(-scale.exponent()));
            for (k, (&v, o)) in xs.iter().zip(os.iter_mut()).enumerate() {
                let a = libm::fabs(v * inv);
                let m = match self {
                    DiagScheme::SrAbsMax => {
                        let u = uniforms.at((g * GROUP_SIZE + k) as u64);
                        E2M1_GRID[sr_index(a, u) as usize]
                    }
                    _ => rtn_magnitude(a),
                };
                let q = m * s;
                *o = if v < 0.0 { -q } else { q };
            }
        }
    }
}

/// A Monte Carlo estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub stderr: f64,
    /// Samples that entered the estimate.
    pub samples: usize,
    /// Samples dropped as degenerate.
    pub excluded: usize,
}

impl Estimate {
    fn from_samples(v: &[f64], excluded: usize) -> Self {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = if v.len() > 1 {
            v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self {
            value: mean,
            stderr: libm::sqrt(var / n),
            samples: v.len(),
            excluded,
        }
    }

    /// `|value - target|` in units of the standard error.
    pub fn z_score(&self, target: f64) -> f64 {
        if self.stderr == 0.0 {
            if self.value == target {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            libm::fabs(self.value - target) / self.stderr
        }
    }
}

fn check_dim(dim: usize, samples: usize) -> Result<()> {
    if dim == 0 || dim % GROUP_SIZE != 0 {
        return Err(Error::InvalidConfig(alloc::format!("dim {dim} is not a positive multiple of 32")));
    }
    if samples == 0 {
        return Err(Error::InvalidConfig("need at least one sample".into()));
    }
    Ok(())
}

fn gaussian_into(rng: &CounterRng, out: &mut [f64]) {
    let mut s = rng.stream(streams::GAUSSIAN, 0);
    out.iter_mut().for_each(|v| *v = s.next_gaussian());
}

/// Mean of `||x - Q(x)||^2 / dim` over `samples` vectors `x ~ N(0, I)`.
/// QuEST sees `H x` (its Hadamard-domain convention); by orthogonality the
/// error is the same in either domain.
pub fn gaussian_mse(scheme: DiagScheme, dim: usize, samples: usize, seed: u64) -> Result<Estimate> {
    Ok(gaussian_mse_many(&[scheme], dim, samples, seed)?[0])
}

/// [`gaussian_mse`] for several schemes on shared draws.
pub fn gaussian_mse_many(schemes: &[DiagScheme], dim: usize, samples: usize, seed: u64) -> Result<Vec<Estimate>> {
    check_dim(dim, samples)?;
    let root = CounterRng::new(seed);
    let mut per = vec![Vec::with_capacity(samples); schemes.len()];
    let (mut x, mut hx, mut q) = (vec![0.0; dim], vec![0.0; dim], vec![0.0; dim]);
    for i in 0..samples {
        let r = root.derive(&[i as u64]);
        gaussian_into(&r, &mut x);
        hx.copy_from_slice(&x);
        hadamard::blockwise_vector_in_place(&mut hx, DEFAULT_BLOCK);
        let sr_seed = r.derive(&[0]).seed();
        for (s, acc) in schemes.iter().zip(per.iter_mut()) {
            let input = if *s == DiagScheme::Quest { &hx } else { &x };
            s.fake_quantize(input, sr_seed, &mut q);
            let err: f64 = input.iter().zip(&q).map(|(a, b)| (a - b) * (a - b)).sum();
            acc.push(err / dim as f64);
        }
    }
    Ok(per.iter().map(|v| Estimate::from_samples(v, 0)).collect())
}

/// `S = <x, x> / <Ĥx, Q(Ĥx)>` with `Ĥ` the randomized blockwise transform
/// keyed by `xi`. Stochastic rounding, if used, is keyed by `xi` as well.
/// `<x, x>` is taken as `<Ĥx, Ĥx>` so exact quantization gives exactly 1.
pub fn rescale_factor_s(x: &[f64], xi: u64, scheme: DiagScheme) -> Result<f64> {
    check_dim(x.len(), 1)?;
    let (mut hx, mut q) = (vec![0.0; x.len()], vec![0.0; x.len()]);
    hadamard::randomized_vector_into(x, DEFAULT_BLOCK, xi, &mut hx);
    let xx: f64 = hx.iter().map(|v| v * v).sum();
    if xx == 0.0 {
        return Err(Error::ZeroDenominator);
    }
    let den = projection(&hx, xi, scheme, &mut q);
    if den == 0.0 {
        return Err(Error::ZeroDenominator);
    }
    Ok(xx / den)
}

/// `<Ĥx, Q(Ĥx)>` given `hx = Ĥx`.
fn projection(hx: &[f64], xi: u64, scheme: DiagScheme, q: &mut [f64]) -> f64 {
    scheme.fake_quantize(hx, CounterRng::new(xi).derive(&[0]).seed(), q);
    hx.iter().zip(q.iter()).map(|(a, b)| a * b).sum()
}

/// Monte Carlo `1 - E[1/S]` over fresh `(x ~ N(0, I), xi)` pairs.
pub fn misalignment(scheme: DiagScheme, dim: usize, samples: usize, seed: u64) -> Result<Estimate> {
    Ok(misalignment_many(&[scheme], dim, samples, seed)?[0])
}

/// [`misalignment`] for several schemes on shared `(x, xi)` draws.
pub fn misalignment_many(schemes: &[DiagScheme], dim: usize, samples: usize, seed: u64) -> Result<Vec<Estimate>> {
    check_dim(dim, samples)?;
    let root = CounterRng::new(seed);
    let mut per = vec![Vec::with_capacity(samples); schemes.len()];
    let mut excluded = vec![0usize; schemes.len()];
    let (mut x, mut hx, mut q) = (vec![0.0; dim], vec![0.0; dim], vec![0.0; dim]);
    for i in 0..samples {
        let r = root.derive(&[i as u64]);
        gaussian_into(&r, &mut x);
        let xi = r.derive(&[1]).seed();
        hadamard::randomized_vector_into(&x, DEFAULT_BLOCK, xi, &mut hx);
        let xx: f64 = hx.iter().map(|v| v * v).sum();
        for (k, s) in schemes.iter().enumerate() {
            let den = projection(&hx, xi, *s, &mut q);
            if den == 0.0 || xx == 0.0 {
                excluded[k] += 1;
            } else {
                per[k].push(1.0 - den / xx);
            }
        }
    }
    Ok(per
        .iter()
        .zip(&excluded)
        .map(|(v, &e)| Estimate::from_samples(v, e))
        .collect())
}

/// Alignment of quantized against exact activation gradients, by depth.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentReport {
    pub scheme: String,
    /// Entry `k` is for the gradient after backpropagating `k + 1` layers.
    pub cosine_by_depth: Vec<f64>,
    /// `1 - <g, g_q> / <g, g>` per depth.
    pub misalignment_by_depth: Vec<f64>,
    pub seed: u64,
}

/// One forward pass under `cfg`, then two backward passes from that same
/// state: one with `cfg`'s backward rounding and one with identity
/// rounding. Only the backward quantization differs between the two.
pub fn gradient_depth_profile(
    model: &Model,
    x: &Matrix,
    grad_out: &Matrix,
    cfg: &LayerConfig,
    seed: u64,
) -> Result<AlignmentReport> {
    let rng = CounterRng::new(seed);
    let trace = model.forward(x, cfg, rng.derive(&[0]).seed())?;
    let bwd_seed = rng.derive(&[1]).seed();
    let quantized = model.backward(&trace, grad_out, cfg, bwd_seed)?;
    let exact = model.backward(&trace, grad_out, &cfg.with_backward(BackwardRounding::Identity), bwd_seed)?;
    let mut cosine_by_depth = Vec::new();
    let mut misalignment_by_depth = Vec::new();
    for (q, e) in quantized.inputs.iter().zip(&exact.inputs) {
        let (q, e) = (q.as_slice(), e.as_slice());
        let qe = crate::matrix::dot(q, e);
        let ee = crate::matrix::dot(e, e);
        let qq = crate::matrix::dot(q, q);
        let cos = if q == e {
            1.0
        } else if ee == 0.0 || qq == 0.0 {
            if ee == qq {
                1.0
            } else {
                0.0
            }
        } else {
            (qe / libm::sqrt(ee * qq)).clamp(-1.0, 1.0)
        };
        cosine_by_depth.push(cos);
        misalignment_by_depth.push(if ee == 0.0 { 0.0 } else { 1.0 - qe / ee });
    }
    let scheme = match cfg.backward {
        BackwardRounding::Identity => "identity",
        BackwardRounding::Rtn => "rtn",
        BackwardRounding::Stochastic => "sr",
    };
    Ok(AlignmentReport {
        scheme: scheme.into(),
        cosine_by_depth,
        misalignment_by_depth,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantizers::{quantize_quest, quantize_rtn_absmax, quantize_sr_absmax};

    fn gaussian(n: usize, seed: u64) -> Vec<f64> {
        let mut v = vec![0.0; n];
        gaussian_into(&CounterRng::new(seed), &mut v);
        v
    }

    #[test]
    fn fake_quantize_matches_library_quantizers() {
        let x = gaussian(256, 1);
        let m = Matrix::from_vec(1, 256, x.clone()).unwrap();
        let mut out = vec![0.0; 256];
        let cases = [
            (DiagScheme::RtnAbsMax, quantize_rtn_absmax(&m).unwrap().0),
            (DiagScheme::SrAbsMax, quantize_sr_absmax(&m, 77).unwrap().0),
            (DiagScheme::Quest, quantize_quest(&m, &QuestParams::default()).unwrap().0),
        ];
        for (s, q) in cases {
            s.fake_quantize(&x, 77, &mut out);
            assert_eq!(out.as_slice(), q.dequantize().as_slice(), "{}", s.name());
        }
        DiagScheme::Identity.fake_quantize(&x, 0, &mut out);
        assert_eq!(out, x);
    }

    #[test]
    fn identity_is_exact() {
        let mse = gaussian_mse(DiagScheme::Identity, 64, 10, 0).unwrap();
        assert_eq!((mse.value, mse.stderr), (0.0, 0.0));
        let mis = misalignment(DiagScheme::Identity, 64, 10, 0).unwrap();
        assert!(mis.value.abs() < 1e-12);
    }

    #[test]
    fn s_is_one_for_grid_exact_transformed_data() {
        // Build y on the grid with absmax 4 in every group (scale 1 with room
        // for round-off), then x = Ĥ^{-1} y so that Ĥ x = y exactly up
        // to transform round-off; RTN then leaves y unchanged.
        let y: Vec<f64> = (0..64).map(|k| E2M1_GRID[(k * 5 + 1) % 7] * if k % 3 == 0 { -1.0 } else { 1.0 }).collect();
        let xi = 42;
        let ym = Matrix::from_vec(1, 64, y).unwrap();
        let cfg = hadamard::HadamardConfig::along(hadamard::Axis::Cols).with_seed(xi);
        let x = hadamard::inverse_randomized_hadamard(&ym, &cfg).unwrap();
        let s = rescale_factor_s(x.as_slice(), xi, DiagScheme::RtnAbsMax).unwrap();
        assert!((s - 1.0).abs() < 1e-12, "S = {s}");
    }

    #[test]
    fn zero_vector_is_an_error() {
        assert!(matches!(rescale_factor_s(&[0.0; 32], 0, DiagScheme::RtnAbsMax), Err(Error::ZeroDenominator)));
        assert!(rescale_factor_s(&[1.0; 33], 0, DiagScheme::RtnAbsMax).is_err());
    }

    #[test]
    fn estimates_are_reproducible() {
        let a = misalignment_many(&[DiagScheme::SrAbsMax, DiagScheme::RtnAbsMax], 256, 50, 9).unwrap();
        let b = misalignment_many(&[DiagScheme::SrAbsMax, DiagScheme::RtnAbsMax], 256, 50, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[1], misalignment(DiagScheme::RtnAbsMax, 256, 50, 9).unwrap());
    }

    #[test]
    fn exact_profile_is_perfectly_aligned() {
        let model = Model::new(&[32, 64, 64, 32], 1).unwrap();
        let x = Matrix::from_vec(32, 32, gaussian(1024, 2)).unwrap();
        let g = Matrix::from_vec(32, 32, gaussian(1024, 3)).unwrap();
        let r = gradient_depth_profile(&model, &x, &g, &LayerConfig::exact(), 5).unwrap();
        assert_eq!(r.cosine_by_depth.len(), 3);
        assert!(r.cosine_by_depth.iter().all(|&c| c == 1.0));
        assert!(r.misalignment_by_depth.iter().all(|&m| m == 0.0));
    }
}
