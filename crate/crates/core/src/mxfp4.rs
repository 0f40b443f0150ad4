//! MXFP4: signed E2M1 elements sharing one E8M0 power-of-two scale per
//! 1-D group of 32 consecutive elements along a row.
//!
//! Element codes are stored two per byte, row-major, element `2k` in the low
//! nibble and `2k + 1` in the high nibble. Each row starts on a fresh byte;
//! the unused high nibble of an odd-length row is zero.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::rng::{streams, CounterRng, IndexedUniforms};
use crate::{Error, Matrix, Result};

/// Elements per shared scale.
pub const GROUP_SIZE: usize = 32;

/// Largest representable E2M1 magnitude.
pub const E2M1_MAX: f64 = 6.0;

/// Non-negative E2M1 magnitudes indexed by the low three code bits.
pub const E2M1_GRID: [f64; 8] = [0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0];

pub fn e2m1_grid() -> [f64; 8] {
    E2M1_GRID
}

/// A 4-bit E2M1 code: sign, two exponent bits, one mantissa bit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct E2M1(u8);

impl E2M1 {
    pub const ZERO: E2M1 = E2M1(0);

    /// Keeps the low nibble of `bits`.
    #[inline]
    pub const fn from_bits(bits: u8) -> Self {
        E2M1(bits & 0x0F)
    }

    /// Code for grid index `magnitude` (0..8); zero is always `+0`.
    #[inline]
    pub fn from_magnitude(magnitude: u8, negative: bool) -> Self {
        debug_assert!(magnitude < 8);
        if magnitude == 0 || !negative {
            E2M1(magnitude)
        } else {
            E2M1(magnitude | 0x8)
        }
    }

    #[inline]
    pub const fn bits(self) -> u8 {
        self.0
    }

    #[inline]
    pub const fn magnitude_index(self) -> u8 {
        self.0 & 0x7
    }

    #[inline]
    pub const fn is_negative(self) -> bool {
        self.0 & 0x8 != 0
    }

    #[inline]
    pub fn to_f64(self) -> f64 {
        let m = E2M1_GRID[self.magnitude_index() as usize];
        if self.is_negative() {
            -m
        } else {
            m
        }
    }

    /// Round-to-nearest onto the grid; ties go to the even mantissa bit and
    /// magnitudes above 6 saturate.
    pub fn round_nearest(x: f64) -> Result<Self> {
        if !x.is_finite() {
            return Err(Error::NonFinite);
        }
        Ok(Self::from_magnitude(rtn_index(libm::fabs(x)), x < 0.0))
    }

    /// Stochastic rounding between the two neighbouring grid points, with
    /// `u` uniform in `[0, 1)`. Magnitudes above 6 saturate.
    pub fn round_stochastic(x: f64, u: f64) -> Result<Self> {
        if !x.is_finite() {
            return Err(Error::NonFinite);
        }
        Ok(Self::from_magnitude(sr_index(libm::fabs(x), u), x < 0.0))
    }
}

/// Nearest grid index for a non-negative magnitude. Midpoints 0.25, 1.25,
/// 2.5 and 5 round down and 0.75, 1.75, 3.5 round up: each lands on the
/// neighbour whose mantissa bit is zero. Branch-free on purpose; the inputs
/// are noise and a comparison tree mispredicts constantly.
#[inline]
pub(crate) fn rtn_index(a: f64) -> u8 {
    (a > 0.25) as u8
        + (a >= 0.75) as u8
        + (a > 1.25) as u8
        + (a >= 1.75) as u8
        + (a > 2.5) as u8
        + (a >= 3.5) as u8
        + (a > 5.0) as u8
}

/// Nearest grid magnitude for a non-negative value.
#[inline]
pub(crate) fn rtn_magnitude(a: f64) -> f64 {
    E2M1_GRID[rtn_index(a) as usize]
}

#[inline]
pub(crate) fn sr_index(a: f64, u: f64) -> u8 {
    if a >= E2M1_MAX {
        return 7;
    }
    // Largest grid index with grid value <= a.
    let lo = (a >= 0.5) as usize
        + (a >= 1.0) as usize
        + (a >= 1.5) as usize
        + (a >= 2.0) as usize
        + (a >= 3.0) as usize
        + (a >= 4.0) as usize;
    let g_lo = E2M1_GRID[lo];
    let g_hi = E2M1_GRID[lo + 1];
    let p_up = (a - g_lo) / (g_hi - g_lo);
    lo as u8 + (u < p_up) as u8
}

pub fn rtn_to_grid(x: f64) -> Result<E2M1> {
    E2M1::round_nearest(x)
}

/// An E8M0 scale: the value `2^(e - 127)` for `e` in `0..=254`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct E8M0(u8);

impl E8M0 {
    pub const BIAS: i32 = 127;
    pub const MIN_EXPONENT: i32 = -127;
    pub const MAX_EXPONENT: i32 = 127;
    pub const ONE: E8M0 = E8M0(127);
    pub const MIN: E8M0 = E8M0(0);

    /// Rejects the reserved byte `0xFF`.
    pub const fn from_bits(bits: u8) -> Result<Self> {
        if bits == 0xFF {
            Err(Error::InvalidScale(bits))
        } else {
            Ok(E8M0(bits))
        }
    }

    /// Scale `2^exponent`, clamped to the representable range.
    pub fn from_exponent(exponent: i32) -> Self {
        let e = exponent.clamp(Self::MIN_EXPONENT, Self::MAX_EXPONENT);
        E8M0((e + Self::BIAS) as u8)
    }

    #[inline]
    pub const fn bits(self) -> u8 {
        self.0
    }

    #[inline]
    pub const fn exponent(self) -> i32 {
        self.0 as i32 - Self::BIAS
    }

    #[inline]
    pub fn to_f64(self) -> f64 {
        pow2(self.exponent())
    }

    #[inline]
    pub fn reciprocal(self) -> f64 {
        pow2(-self.exponent())
    }
}

/// `2^e` for `|e| <= 1022`, exactly.
#[inline]
pub(crate) fn pow2(e: i32) -> f64 {
    debug_assert!((-1022..=1023).contains(&e));
    f64::from_bits(((e + 1023) as u64) << 52)
}

/// Smallest power-of-two scale `s` with `absmax / s <= 6`, clamped to the
/// E8M0 range. An all-zero group returns the smallest scale.
pub fn absmax_scale(group: &[f64]) -> E8M0 {
    let absmax = group.iter().fold(0.0f64, |m, &x| m.max(libm::fabs(x)));
    scale_for_absmax(absmax)
}

pub(crate) fn scale_for_absmax(absmax: f64) -> E8M0 {
    if absmax == 0.0 || !absmax.is_finite() {
        return if absmax == 0.0 {
            E8M0::MIN
        } else {
            E8M0::from_exponent(E8M0::MAX_EXPONENT)
        };
    }
    // frexp: absmax = m * 2^k with m in [0.5, 1). Start one step low and
    // walk up so the `<= 6` test is evaluated exactly.
    let (_, k) = libm::frexp(absmax / E2M1_MAX);
    let mut e = (k - 1).clamp(E8M0::MIN_EXPONENT, E8M0::MAX_EXPONENT);
    while e < E8M0::MAX_EXPONENT && absmax * pow2(-e) > E2M1_MAX {
        e += 1;
    }
    while e > E8M0::MIN_EXPONENT && absmax * pow2(-(e - 1)) <= E2M1_MAX {
        e -= 1;
    }
    E8M0::from_exponent(e)
}

/// Element rounding used by [`quantize_tensor`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rounding {
    Nearest,
    /// Uniforms come from [`IndexedUniforms`] keyed by `seed`, addressed by
    /// the element linear index.
    Stochastic {
        seed: u64,
    },
}

/// A rows x cols MXFP4 tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantizedTensor {
    rows: usize,
    cols: usize,
    codes: Vec<u8>,
    scales: Vec<E8M0>,
}

impl QuantizedTensor {
    pub fn zeroed(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            codes: vec![0; rows * row_bytes(cols)],
            scales: vec![E8M0::MIN; rows * groups_per_row(cols)],
        }
    }

    /// Builds a tensor from packed codes and raw scale bytes.
    pub fn from_parts(rows: usize, cols: usize, codes: Vec<u8>, scales: &[u8]) -> Result<Self> {
        let code_len = rows * row_bytes(cols);
        let scale_len = rows * groups_per_row(cols);
        if codes.len() != code_len || scales.len() != scale_len {
            return Err(Error::ShapeMismatch(format!(
                "{}x{} needs {} code and {} scale bytes, got {} and {}",
                rows,
                cols,
                code_len,
                scale_len,
                codes.len(),
                scales.len()
            )));
        }
        if cols % 2 == 1 {
            let rb = row_bytes(cols);
            for r in 0..rows {
                if codes[r * rb + rb - 1] & 0xF0 != 0 {
                    return Err(Error::Padding(r));
                }
            }
        }
        let scales = scales
            .iter()
            .map(|&b| E8M0::from_bits(b))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            rows,
            cols,
            codes,
            scales,
        })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn groups_per_row(&self) -> usize {
        groups_per_row(self.cols)
    }

    pub fn packed_codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn scales(&self) -> &[E8M0] {
        &self.scales
    }

    #[inline]
    pub fn code(&self, i: usize, j: usize) -> E2M1 {
        let byte = self.codes[i * row_bytes(self.cols) + j / 2];
        E2M1::from_bits(if j % 2 == 0 { byte } else { byte >> 4 })
    }

    #[inline]
    pub fn set_code(&mut self, i: usize, j: usize, code: E2M1) {
        let idx = i * row_bytes(self.cols) + j / 2;
        let byte = &mut self.codes[idx];
        if j % 2 == 0 {
            *byte = (*byte & 0xF0) | code.bits();
        } else {
            *byte = (*byte & 0x0F) | (code.bits() << 4);
        }
    }

    #[inline]
    pub fn scale(&self, i: usize, group: usize) -> E8M0 {
        self.scales[i * self.groups_per_row() + group]
    }

    #[inline]
    pub fn set_scale(&mut self, i: usize, group: usize, scale: E8M0) {
        let g = self.groups_per_row();
        self.scales[i * g + group] = scale;
    }

    /// Exact element values `code * scale`.
    pub fn dequantize(&self) -> Matrix {
        let mut out = Matrix::zeros(self.rows, self.cols);
        for i in 0..self.rows {
            let row = out.row_mut(i);
            for (g, chunk) in row.chunks_mut(GROUP_SIZE).enumerate() {
                let s = self.scale(i, g).to_f64();
                for (k, v) in chunk.iter_mut().enumerate() {
                    *v = self.code(i, g * GROUP_SIZE + k).to_f64() * s;
                }
            }
        }
        out
    }

    /// Serialized `MXF4` container size in bytes.
    pub fn serialized_len(&self) -> usize {
        HEADER_LEN + self.codes.len() + self.scales.len()
    }

    pub fn serialize(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.serialized_len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.rows as u32).to_le_bytes());
        out.extend_from_slice(&(self.cols as u32).to_le_bytes());
        out.extend_from_slice(&(GROUP_SIZE as u16).to_le_bytes());
        out.extend_from_slice(&0u16.to_le_bytes());
        out.extend_from_slice(&self.codes);
        out.extend(self.scales.iter().map(|s| s.bits()));
        out
    }

    pub fn deserialize(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::BadMagic);
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::Truncated {
                expected: HEADER_LEN,
                found: bytes.len(),
            });
        }
        let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
        let u32_at =
            |o: usize| u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]);
        let version = u16_at(4);
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let rows = u32_at(6) as usize;
        let cols = u32_at(10) as usize;
        let group = u16_at(14);
        if group as usize != GROUP_SIZE {
            return Err(Error::UnsupportedGroupSize(group));
        }
        let code_len = rows * row_bytes(cols);
        let scale_len = rows * groups_per_row(cols);
        let expected = HEADER_LEN + code_len + scale_len;
        if bytes.len() != expected {
            return Err(Error::Truncated {
                expected,
                found: bytes.len(),
            });
        }
        let codes = bytes[HEADER_LEN..HEADER_LEN + code_len].to_vec();
        Self::from_parts(rows, cols, codes, &bytes[HEADER_LEN + code_len..])
    }
}

const MAGIC: &[u8; 4] = b"MXF4";
const VERSION: u16 = 1;
/// magic(4) + version(2) + rows(4) + cols(4) + group size(2) + reserved(2)
pub const HEADER_LEN: usize = 18;

#[inline]
pub fn row_bytes(cols: usize) -> usize {
    cols.div_ceil(2)
}

#[inline]
pub fn groups_per_row(cols: usize) -> usize {
    cols.div_ceil(GROUP_SIZE)
}

/// Quantizes each row-wise group with the scale chosen by `scale_rule`.
pub fn quantize_tensor<F>(m: &Matrix, mut scale_rule: F, rounding: Rounding) -> Result<QuantizedTensor>
where
    F: FnMut(&[f64]) -> E8M0,
{
    quantize_with_scales(m, |_, _, group| scale_rule(group), rounding)
}

/// Like [`quantize_tensor`] but the rule also sees `(row, group index)`.
pub(crate) fn quantize_with_scales<F>(
    m: &Matrix,
    mut scale_for: F,
    rounding: Rounding,
) -> Result<QuantizedTensor>
where
    F: FnMut(usize, usize, &[f64]) -> E8M0,
{
    m.ensure_finite()?;
    let (rows, cols) = m.shape();
    let mut q = QuantizedTensor::zeroed(rows, cols);
    let mut rng = match rounding {
        Rounding::Stochastic { seed } => Some(IndexedUniforms::new(CounterRng::new(seed), streams::STOCHASTIC_ROUNDING)),
        Rounding::Nearest => None,
    };
    for i in 0..rows {
        for (g, group) in m.row(i).chunks(GROUP_SIZE).enumerate() {
            let s = scale_for(i, g, group);
            q.set_scale(i, g, s);
            let inv = s.reciprocal();
            for (k, &x) in group.iter().enumerate() {
                let j = g * GROUP_SIZE + k;
                let a = libm::fabs(x * inv);
                let idx = match &mut rng {
                    None => rtn_index(a),
                    Some(r) => {
                        let u = r.at((i * cols + j) as u64);
                        sr_index(a, u)
                    }
                };
                q.set_code(i, j, E2M1::from_magnitude(idx, x < 0.0));
            }
        }
    }
    Ok(q)
}
