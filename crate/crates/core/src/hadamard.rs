//! Orthonormal blockwise Walsh-Hadamard transforms.
//!
//! `H_g` is applied independently to each contiguous length-`g` block along
//! one matrix axis. The randomized variant multiplies each block by a sign
//! vector `d` before transforming (`H_g (d ⊙ x)`); `d` depends only on the
//! seed and the block position along the axis, so two operands transformed
//! with the same seed along their shared contraction axis see identical
//! signs and `Ĥ(A) Ĥ(B)^T = A B^T`.

use alloc::vec::Vec;
use core::ops::{Add, Mul, Sub};

use crate::rng::{streams, CounterRng};
use crate::{Error, Matrix, Result};

pub const DEFAULT_BLOCK: usize = 32;
pub const MAX_BLOCK: usize = 256;

/// Which index the transform runs along.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Along the row index: every column is transformed.
    Rows,
    /// Along the column index: every row is transformed.
    Cols,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HadamardConfig {
    pub block_size: usize,
    pub axis: Axis,
    /// Sign seed, used only by the randomized transform.
    pub seed: u64,
}

impl HadamardConfig {
    pub fn along(axis: Axis) -> Self {
        Self {
            block_size: DEFAULT_BLOCK,
            axis,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_block_size(mut self, block_size: usize) -> Self {
        self.block_size = block_size;
        self
    }
}

/// Scalar types the butterfly network runs on.
pub trait Real: Copy + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> {
    const FRAC_1_SQRT_2: Self;
}

impl Real for f64 {
    const FRAC_1_SQRT_2: Self = core::f64::consts::FRAC_1_SQRT_2;
}

impl Real for f32 {
    const FRAC_1_SQRT_2: Self = core::f32::consts::FRAC_1_SQRT_2;
}

fn check_block(g: usize) -> Result<()> {
    if !(2..=MAX_BLOCK).contains(&g) || !g.is_power_of_two() {
        Err(Error::BlockSize(g))
    } else {
        Ok(())
    }
}

/// In-place `H_g v` for `g = v.len()`. Stages run with ascending stride and
/// each butterfly scales by `1/sqrt(2)`.
pub fn fwht_in_place<T: Real>(v: &mut [T]) -> Result<()> {
    check_block(v.len())?;
    butterflies(v);
    Ok(())
}

#[inline]
fn butterflies<T: Real>(v: &mut [T]) {
    let n = v.len();
    let mut h = 1;
    while h < n {
        for start in (0..n).step_by(2 * h) {
            for i in start..start + h {
                let a = v[i];
                let b = v[i + h];
                v[i] = (a + b) * T::FRAC_1_SQRT_2;
                v[i + h] = (a - b) * T::FRAC_1_SQRT_2;
            }
        }
        h *= 2;
    }
}

pub fn fwht_block<T: Real>(v: &[T]) -> Result<Vec<T>> {
    let mut out = v.to_vec();
    fwht_in_place(&mut out)?;
    Ok(out)
}

/// Writes `d` for block `block_index` into `signs` (`true` = negate).
pub fn sign_vector(seed: u64, block_index: usize, signs: &mut [bool]) {
    let rng = CounterRng::new(seed);
    for (chunk_idx, chunk) in signs.chunks_mut(128).enumerate() {
        let words = rng.block(streams::HADAMARD_SIGNS, block_index as u64, chunk_idx as u32);
        for (lane, s) in chunk.iter_mut().enumerate() {
            *s = (words[lane / 32] >> (lane % 32)) & 1 == 1;
        }
    }
}

#[derive(Clone, Copy)]
enum Mode {
    Fixed,
    /// `H (d ⊙ x)`
    RandomForward(u64),
    /// `d ⊙ (H x)`
    RandomInverse(u64),
}

fn apply(m: &Matrix, cfg: &HadamardConfig, mode: Mode) -> Result<Matrix> {
    check_block(cfg.block_size)?;
    match cfg.axis {
        Axis::Cols => apply_along_cols(m, cfg.block_size, mode),
        Axis::Rows => Ok(apply_along_cols(&m.transpose(), cfg.block_size, mode)?.transpose()),
    }
}

fn apply_along_cols(m: &Matrix, g: usize, mode: Mode) -> Result<Matrix> {
    let cols = m.cols();
    if cols % g != 0 {
        return Err(Error::Indivisible { len: cols, block: g });
    }
    let blocks = cols / g;
    let sign_table: Vec<bool> = match mode {
        Mode::Fixed => Vec::new(),
        Mode::RandomForward(seed) | Mode::RandomInverse(seed) => {
            let mut t = alloc::vec![false; cols];
            for (b, chunk) in t.chunks_mut(g).enumerate() {
                sign_vector(seed, b, chunk);
            }
            t
        }
    };
    let mut out = m.clone();
    for i in 0..m.rows() {
        let row = out.row_mut(i);
        for b in 0..blocks {
            let block = &mut row[b * g..(b + 1) * g];
            let signs = if sign_table.is_empty() {
                &[][..]
            } else {
                &sign_table[b * g..(b + 1) * g]
            };
            if let Mode::RandomForward(_) = mode {
                flip(block, signs);
            }
            butterflies(block);
            if let Mode::RandomInverse(_) = mode {
                flip(block, signs);
            }
        }
    }
    Ok(out)
}

#[inline]
fn flip(block: &mut [f64], signs: &[bool]) {
    // Sign-bit xor rather than a branch: the signs are random.
    for (v, &neg) in block.iter_mut().zip(signs) {
        *v = f64::from_bits(v.to_bits() ^ ((neg as u64) << 63));
    }
}

pub fn hadamard_blockwise(m: &Matrix, cfg: &HadamardConfig) -> Result<Matrix> {
    apply(m, cfg, Mode::Fixed)
}

/// `Ĥ_g` with signs keyed by `cfg.seed`.
pub fn randomized_hadamard(m: &Matrix, cfg: &HadamardConfig) -> Result<Matrix> {
    apply(m, cfg, Mode::RandomForward(cfg.seed))
}

/// Inverse of the fixed transform, which is the transform itself.
pub fn inverse_hadamard(m: &Matrix, cfg: &HadamardConfig) -> Result<Matrix> {
    apply(m, cfg, Mode::Fixed)
}

/// Inverse of [`randomized_hadamard`]: `d ⊙ (H y)`.
pub fn inverse_randomized_hadamard(m: &Matrix, cfg: &HadamardConfig) -> Result<Matrix> {
    apply(m, cfg, Mode::RandomInverse(cfg.seed))
}

/// Randomized transform of one vector split into length-`g` blocks, block
/// `b` using the signs of block position `b`. Writes into `out`.
pub(crate) fn randomized_vector_into(x: &[f64], g: usize, seed: u64, out: &mut [f64]) {
    debug_assert_eq!(x.len() % g, 0);
    let mut signs = [false; MAX_BLOCK];
    out.copy_from_slice(x);
    for (b, block) in out.chunks_mut(g).enumerate() {
        sign_vector(seed, b, &mut signs[..g]);
        flip(block, &signs[..g]);
        butterflies(block);
    }
}

/// Fixed transform of one vector in place, blockwise.
pub(crate) fn blockwise_vector_in_place(x: &mut [f64], g: usize) {
    for block in x.chunks_mut(g) {
        butterflies(block);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::CounterRng;
    use std::vec;

    const SQRT2: f64 = core::f64::consts::SQRT_2;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * b.abs().max(1.0)
    }

    #[test]
    fn two_point_transform() {
        let y = fwht_block(&[1.0, 1.0]).unwrap();
        assert!(close(y[0], SQRT2, 1e-15) && y[1] == 0.0);
        let y = fwht_block(&[1.0, -1.0]).unwrap();
        assert!(y[0] == 0.0 && close(y[1], SQRT2, 1e-15));
    }

    #[test]
    fn block_size_validation() {
        assert_eq!(fwht_block(&[1.0f64; 3]), Err(Error::BlockSize(3)));
        assert_eq!(fwht_block(&[1.0f64; 1]), Err(Error::BlockSize(1)));
        let m = Matrix::zeros(2, 4);
        let cfg = HadamardConfig::along(Axis::Cols).with_block_size(1);
        assert!(hadamard_blockwise(&m, &cfg).is_err());
        let cfg = HadamardConfig::along(Axis::Cols).with_block_size(8);
        assert_eq!(
            hadamard_blockwise(&m, &cfg),
            Err(Error::Indivisible { len: 4, block: 8 })
        );
    }

    #[test]
    fn single_precision_path() {
        let mut s = CounterRng::new(3).stream(0, 0);
        let v: std::vec::Vec<f64> = (0..32).map(|_| s.next_gaussian()).collect();
        let v32: std::vec::Vec<f32> = v.iter().map(|&x| x as f32).collect();
        let a = fwht_block(&v).unwrap();
        let b = fwht_block(&v32).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - *y as f64).abs() < 1e-5);
        }
    }

    #[test]
    fn blockwise_example() {
        let m = Matrix::from_vec(1, 4, vec![1.0, 1.0, 1.0, -1.0]).unwrap();
        let cfg = HadamardConfig::along(Axis::Cols).with_block_size(2);
        let y = hadamard_blockwise(&m, &cfg).unwrap();
        let want = [SQRT2, 0.0, 0.0, SQRT2];
        for (a, b) in y.as_slice().iter().zip(want) {
            assert!(close(*a, b, 1e-15));
        }
    }

    #[test]
    fn rows_axis_matches_transpose() {
        let mut s = CounterRng::new(5).stream(0, 0);
        let m = Matrix::from_fn(64, 3, |_, _| s.next_gaussian());
        let cfg = HadamardConfig::along(Axis::Rows).with_seed(17);
        let direct = randomized_hadamard(&m, &cfg).unwrap();
        let cfg_c = HadamardConfig::along(Axis::Cols).with_seed(17);
        let via_t = randomized_hadamard(&m.transpose(), &cfg_c).unwrap().transpose();
        assert_eq!(direct, via_t);
    }

    #[test]
    fn signs_independent_of_other_dimension() {
        let mut s = CounterRng::new(6).stream(0, 0);
        let big = Matrix::from_fn(5, 64, |_, _| s.next_gaussian());
        let small = Matrix::from_vec(1, 64, big.row(3).to_vec()).unwrap();
        let cfg = HadamardConfig::along(Axis::Cols).with_seed(99);
        let a = randomized_hadamard(&big, &cfg).unwrap();
        let b = randomized_hadamard(&small, &cfg).unwrap();
        assert_eq!(a.row(3), b.row(0));
    }

    #[test]
    fn randomized_inverse() {
        let mut s = CounterRng::new(8).stream(0, 0);
        let m = Matrix::from_fn(4, 96, |_, _| s.next_gaussian());
        let cfg = HadamardConfig::along(Axis::Cols).with_seed(1234);
        let y = randomized_hadamard(&m, &cfg).unwrap();
        let back = inverse_randomized_hadamard(&y, &cfg).unwrap();
        assert!(back.relative_error(&m) < 1e-12);
        assert_eq!(randomized_hadamard(&m, &cfg).unwrap(), y);
    }

    #[test]
    fn vector_helpers_agree_with_matrix_path() {
        let mut s = CounterRng::new(10).stream(0, 0);
        let x: std::vec::Vec<f64> = (0..128).map(|_| s.next_gaussian()).collect();
        let m = Matrix::from_vec(1, 128, x.clone()).unwrap();
        let cfg = HadamardConfig::along(Axis::Cols).with_seed(77);
        let mut out = vec![0.0; 128];
        randomized_vector_into(&x, 32, 77, &mut out);
        assert_eq!(randomized_hadamard(&m, &cfg).unwrap().as_slice(), &out[..]);
        let mut y = x.clone();
        blockwise_vector_in_place(&mut y, 32);
        assert_eq!(hadamard_blockwise(&m, &cfg).unwrap().as_slice(), &y[..]);
    }
}
