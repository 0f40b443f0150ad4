//! The fully-quantized linear layer `Y = X W^T`.
//!
//! Forward: fixed blockwise Hadamard along `in` on both operands, QuEST
//! projection to MXFP4 (keeping the trust masks), one low-precision GEMM.
//!
//! Backward, for each of the two gradient GEMMs: a shared-seed randomized
//! Hadamard along the contraction axis (`out` for `dX`, `batch` for `dW`),
//! a 3/4 pre-scale, RTN to MXFP4, the GEMM, the trust mask, a 16/9
//! compensation and the inverse fixed Hadamard along `in`. The operands
//! are re-read from the saved forward MXFP4 tensors, not from master weights.

use alloc::format;

use crate::hadamard::{self, Axis, HadamardConfig};
use crate::mxfp4::QuantizedTensor;
use crate::quantizers::{quantize_rtn_absmax, quantize_sr_absmax, ClipMask, QuantScheme};
use crate::rng::CounterRng;
use crate::{Error, Matrix, Result};

/// Pre-scale applied to both backward operands before RTN.
pub const BACKWARD_PRESCALE: f64 = 3.0 / 4.0;
/// Compensation applied after each backward GEMM: `(4/3)^2`.
pub const BACKWARD_COMPENSATION: f64 = 16.0 / 9.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Accumulation {
    #[default]
    Single,
    Double,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OperandPath {
    #[default]
    Quantized,
    /// Identity quantizers everywhere; transforms and constants still run.
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct GemmPolicy {
    pub accumulation: Accumulation,
    pub operands: OperandPath,
}

/// Element rounding for the two backward GEMMs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackwardRounding {
    Identity,
    Rtn,
    Stochastic,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerConfig {
    /// `None` keeps forward operands unquantized.
    pub forward: Option<QuantScheme>,
    pub backward: BackwardRounding,
    pub gemm: GemmPolicy,
    pub block_size: usize,
    /// `false` drops every Hadamard transform (ablation only).
    pub hadamard: bool,
}

impl LayerConfig {
    /// QuEST forward, RTN backward.
    pub fn quartet() -> Self {
        Self {
            forward: Some(QuantScheme::quest()),
            backward: BackwardRounding::Rtn,
            gemm: GemmPolicy::default(),
            block_size: hadamard::DEFAULT_BLOCK,
            hadamard: true,
        }
    }

    pub fn exact() -> Self {
        Self {
            forward: None,
            backward: BackwardRounding::Identity,
            ..Self::quartet()
        }
    }

    pub fn with_backward(mut self, backward: BackwardRounding) -> Self {
        self.backward = backward;
        self
    }

    pub fn with_accumulation(mut self, acc: Accumulation) -> Self {
        self.gemm.accumulation = acc;
        self
    }

    fn forward_scheme(&self) -> Option<QuantScheme> {
        match self.gemm.operands {
            OperandPath::Exact => None,
            OperandPath::Quantized => self.forward,
        }
    }

    fn backward_rounding(&self) -> BackwardRounding {
        match self.gemm.operands {
            OperandPath::Exact => BackwardRounding::Identity,
            OperandPath::Quantized => self.backward,
        }
    }

    fn transform(&self) -> HadamardConfig {
        HadamardConfig::along(Axis::Cols).with_block_size(self.block_size)
    }
}

/// A GEMM operand in the Hadamard domain.
#[derive(Debug, Clone, PartialEq)]
pub enum Operand {
    Quantized(QuantizedTensor),
    Dense(Matrix),
}

impl Operand {
    pub fn values(&self) -> Matrix {
        match self {
            Operand::Quantized(q) => q.dequantize(),
            Operand::Dense(m) => m.clone(),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        match self {
            Operand::Quantized(q) => (q.rows(), q.cols()),
            Operand::Dense(m) => m.shape(),
        }
    }
}

/// State saved by [`forward`] for [`backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct LayerContext {
    /// batch x in
    pub x: Operand,
    /// out x in
    pub w: Operand,
    pub mask_x: ClipMask,
    pub mask_w: ClipMask,
}

impl LayerContext {
    pub fn batch(&self) -> usize {
        self.x.shape().0
    }

    pub fn in_features(&self) -> usize {
        self.x.shape().1
    }

    pub fn out_features(&self) -> usize {
        self.w.shape().0
    }
}

/// `A B^T` over dense operands, summing in index order.
pub fn gemm_dense(a: &Matrix, b: &Matrix, acc: Accumulation) -> Result<Matrix> {
    if a.cols() != b.cols() {
        return Err(Error::ShapeMismatch(format!(
            "contraction lengths {} and {} differ",
            a.cols(),
            b.cols()
        )));
    }
    match acc {
        Accumulation::Double => a.matmul_nt(b),
        Accumulation::Single => {
            let a32: alloc::vec::Vec<f32> = a.as_slice().iter().map(|&v| v as f32).collect();
            let b32: alloc::vec::Vec<f32> = b.as_slice().iter().map(|&v| v as f32).collect();
            let k = a.cols();
            Ok(Matrix::from_fn(a.rows(), b.rows(), |i, j| {
                let ra = &a32[i * k..(i + 1) * k];
                let rb = &b32[j * k..(j + 1) * k];
                ra.iter().zip(rb).fold(0.0f32, |s, (x, y)| s + x * y) as f64
            }))
        }
    }
}

/// Simulated MXFP4 GEMM: `dequantize(A) dequantize(B)^T`. Both operands
/// must be grouped along their shared contraction axis.
pub fn gemm_lp(a: &QuantizedTensor, b: &QuantizedTensor, policy: &GemmPolicy) -> Result<Matrix> {
    if a.cols() != b.cols() {
        return Err(Error::ShapeMismatch(format!(
            "scale groups misaligned: contraction lengths {} and {}",
            a.cols(),
            b.cols()
        )));
    }
    gemm_dense(&a.dequantize(), &b.dequantize(), policy.accumulation)
}

fn gemm_operands(a: &Operand, b: &Operand, acc: Accumulation) -> Result<Matrix> {
    match (a, b) {
        (Operand::Quantized(qa), Operand::Quantized(qb)) => gemm_lp(
            qa,
            qb,
            &GemmPolicy {
                accumulation: acc,
                operands: OperandPath::Quantized,
            },
        ),
        _ => gemm_dense(&a.values(), &b.values(), acc),
    }
}

fn check_divisible(len: usize, block: usize) -> Result<()> {
    if len % block != 0 {
        Err(Error::Indivisible { len, block })
    } else {
        Ok(())
    }
}

fn quantize_forward(
    m: Matrix,
    scheme: Option<QuantScheme>,
    tag: u64,
) -> Result<(Operand, ClipMask)> {
    match scheme {
        None => {
            let mask = ClipMask::all_true(m.rows(), m.cols());
            Ok((Operand::Dense(m), mask))
        }
        Some(s) => {
            let s = match s {
                QuantScheme::SrAbsMax { seed } => s.reseeded(CounterRng::new(seed).derive(&[tag]).seed()),
                _ => s,
            };
            let (q, mask) = s.quantize(&m)?;
            Ok((Operand::Quantized(q), mask))
        }
    }
}

pub fn forward(x: &Matrix, w: &Matrix, cfg: &LayerConfig) -> Result<(Matrix, LayerContext)> {
    if x.cols() != w.cols() {
        return Err(Error::ShapeMismatch(format!(
            "input has {} features, weight expects {}",
            x.cols(),
            w.cols()
        )));
    }
    x.ensure_finite()?;
    w.ensure_finite()?;
    let t = cfg.transform();
    let (x_h, w_h) = if cfg.hadamard {
        check_divisible(x.cols(), cfg.block_size)?;
        (hadamard::hadamard_blockwise(x, &t)?, hadamard::hadamard_blockwise(w, &t)?)
    } else {
        (x.clone(), w.clone())
    };
    let scheme = cfg.forward_scheme();
    let (xq, mask_x) = quantize_forward(x_h, scheme, 0)?;
    let (wq, mask_w) = quantize_forward(w_h, scheme, 1)?;
    let y = gemm_operands(&xq, &wq, cfg.gemm.accumulation)?;
    Ok((
        y,
        LayerContext {
            x: xq,
            w: wq,
            mask_x,
            mask_w,
        },
    ))
}

fn quantize_backward(m: &Matrix, rounding: BackwardRounding, seed: u64) -> Result<Operand> {
    let mut scaled = m.clone();
    scaled.scale_in_place(BACKWARD_PRESCALE);
    Ok(match rounding {
        BackwardRounding::Identity => Operand::Dense(scaled),
        BackwardRounding::Rtn => Operand::Quantized(quantize_rtn_absmax(&scaled)?.0),
        BackwardRounding::Stochastic => Operand::Quantized(quantize_sr_absmax(&scaled, seed)?.0),
    })
}

/// Both gradients after the GEMM, mask and 16/9 compensation, still in the
/// forward Hadamard domain (before the inverse transform along `in`).
pub fn backward_hadamard_domain(
    dy: &Matrix,
    ctx: &LayerContext,
    cfg: &LayerConfig,
    seed: u64,
) -> Result<(Matrix, Matrix)> {
    let (batch, out) = (ctx.batch(), ctx.out_features());
    if dy.shape() != (batch, out) {
        return Err(Error::ShapeMismatch(format!(
            "output gradient is {}x{}, context expects {}x{}",
            dy.rows(),
            dy.cols(),
            batch,
            out
        )));
    }
    if ctx.w.shape().1 != ctx.in_features()
        || ctx.mask_x.rows() != batch
        || ctx.mask_x.cols() != ctx.in_features()
        || ctx.mask_w.rows() != out
        || ctx.mask_w.cols() != ctx.in_features()
    {
        return Err(Error::ShapeMismatch("inconsistent layer context".into()));
    }
    dy.ensure_finite()?;
    let rounding = cfg.backward_rounding();
    let signs = cfg.transform().with_seed(seed);
    let rng = CounterRng::new(seed);
    let rotate = |m: &Matrix| -> Result<Matrix> {
        if cfg.hadamard {
            check_divisible(m.cols(), cfg.block_size)?;
            hadamard::randomized_hadamard(m, &signs)
        } else {
            Ok(m.clone())
        }
    };
    let x_vals = ctx.x.values();
    let w_vals = ctx.w.values();

    // dX: contract over `out`.
    let g_h = rotate(dy)?;
    let wt_h = rotate(&w_vals.transpose())?;
    let g_q = quantize_backward(&g_h, rounding, rng.derive(&[0]).seed())?;
    let wt_q = quantize_backward(&wt_h, rounding, rng.derive(&[1]).seed())?;
    let mut dx = gemm_operands(&g_q, &wt_q, cfg.gemm.accumulation)?;
    ctx.mask_x.apply(&mut dx);
    dx.scale_in_place(BACKWARD_COMPENSATION);

    // dW: contract over `batch`.
    let gt_h = rotate(&dy.transpose())?;
    let xt_h = rotate(&x_vals.transpose())?;
    let gt_q = quantize_backward(&gt_h, rounding, rng.derive(&[2]).seed())?;
    let xt_q = quantize_backward(&xt_h, rounding, rng.derive(&[3]).seed())?;
    let mut dw = gemm_operands(&gt_q, &xt_q, cfg.gemm.accumulation)?;
    ctx.mask_w.apply(&mut dw);
    dw.scale_in_place(BACKWARD_COMPENSATION);
    Ok((dx, dw))
}

/// Returns `(dX, dW)` for output gradient `dy`; `seed` keys the
/// randomized Hadamard signs shared by each GEMM's operands.
pub fn backward(
    dy: &Matrix,
    ctx: &LayerContext,
    cfg: &LayerConfig,
    seed: u64,
) -> Result<(Matrix, Matrix)> {
    let (dx, dw) = backward_hadamard_domain(dy, ctx, cfg, seed)?;
    if !cfg.hadamard {
        return Ok((dx, dw));
    }
    let t = cfg.transform();
    Ok((hadamard::inverse_hadamard(&dx, &t)?, hadamard::inverse_hadamard(&dw, &t)?))
}
