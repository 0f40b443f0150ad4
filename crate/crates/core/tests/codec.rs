use proptest::prelude::*;
use quartet_core::mxfp4::*;
use quartet_core::rng::CounterRng;
use quartet_core::Matrix;

const GOLDEN_3X40: &[u8] = include_bytes!("golden/rtn_3x40.mxf4");

fn golden_matrix() -> Matrix {
    Matrix::from_fn(3, 40, |i, j| (((i * 40 + j) * 7 % 23) as f64 - 11.0) * 0.37 * [0.5, 1.0, 2.0][i])
}

#[test]
fn every_code_and_scale_round_trips() {
    for e in -16..16 {
        let scale = E8M0::from_exponent(e);
        for bits in 0..16u8 {
            let code = E2M1::from_bits(bits);
            let v = code.to_f64() * scale.to_f64();
            let m = Matrix::from_vec(1, 1, vec![v]).unwrap();
            let q = quantize_tensor(&m, |_| scale, Rounding::Nearest).unwrap();
            let back = q.dequantize().get(0, 0);
            // -0 is canonicalized to +0 on encode; every other code survives.
            let want = if bits == 0x8 { 0 } else { bits };
            assert_eq!(q.code(0, 0).bits(), want, "code {bits:#x} at 2^{e}");
            assert_eq!(back.to_bits(), (v + 0.0).to_bits(), "code {bits:#x} at 2^{e}");
            assert_eq!(q.scale(0, 0), scale);
        }
    }
}

#[test]
fn hand_derived_container_bytes() {
    // absmax 3 needs scale 2^-1; 1.5 -> 3.0 (index 5), -3.0 -> -6.0 (0xF).
    let m = Matrix::from_vec(1, 2, vec![1.5, -3.0]).unwrap();
    let q = quantize_tensor(&m, absmax_scale, Rounding::Nearest).unwrap();
    let want = [
        b'M', b'X', b'F', b'4', 1, 0, 1, 0, 0, 0, 2, 0, 0, 0, 32, 0, 0, 0, 0xF5, 0x7E,
    ];
    assert_eq!(q.serialize(), want);
    assert_eq!(QuantizedTensor::deserialize(&want).unwrap(), q);
}

#[test]
fn frozen_golden_file_matches() {
    let q = quantize_tensor(&golden_matrix(), absmax_scale, Rounding::Nearest).unwrap();
    assert_eq!(q.serialize(), GOLDEN_3X40);
    let back = QuantizedTensor::deserialize(GOLDEN_3X40).unwrap();
    assert_eq!(back, q);
    assert_eq!(GOLDEN_3X40.len(), HEADER_LEN + 3 * 20 + 3 * 2);
}

#[test]
fn scalar_oracle_on_gaussian_vector() {
    let mut s = CounterRng::new(77).stream(0, 0);
    let v: Vec<f64> = (0..32).map(|_| 3.0 * s.next_gaussian()).collect();
    let q = quantize_tensor(&Matrix::from_vec(1, 32, v.clone()).unwrap(), absmax_scale, Rounding::Nearest).unwrap();
    // Oracle: smallest power of two s with absmax / s <= 6, then nearest
    // grid point by exhaustive search with ties to the even mantissa.
    let absmax = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let mut e = -127i32;
    while absmax / 2f64.powi(e) > 6.0 {
        e += 1;
    }
    assert_eq!(q.scale(0, 0).exponent(), e);
    let s = 2f64.powi(e);
    for (j, &x) in v.iter().enumerate() {
        let a = (x / s).abs();
        let mut best = 0;
        for k in 1..8 {
            let (d, db) = ((a - E2M1_GRID[k]).abs(), (a - E2M1_GRID[best]).abs());
            if d < db || (d == db && k % 2 == 0) {
                best = k;
            }
        }
        let want = E2M1_GRID[best] * s * x.signum();
        assert_eq!(q.dequantize().get(0, j), want + 0.0, "element {j}");
    }
}

#[test]
fn reserved_scale_is_rejected() {
    let mut bytes = GOLDEN_3X40.to_vec();
    let n = bytes.len();
    bytes[n - 1] = 0xFF;
    assert!(QuantizedTensor::deserialize(&bytes).is_err());
}

fn arb_tensor() -> impl Strategy<Value = QuantizedTensor> {
    (1usize..4, prop::sample::select(vec![1usize, 31, 32, 33, 64, 100])).prop_flat_map(|(rows, cols)| {
        let codes = prop::collection::vec(0u8..16, rows * cols);
        let scales = prop::collection::vec(0u8..255, rows * groups_per_row(cols));
        (Just(rows), Just(cols), codes, scales).prop_map(|(rows, cols, codes, scales)| {
            let mut q = QuantizedTensor::zeroed(rows, cols);
            for i in 0..rows {
                for j in 0..cols {
                    q.set_code(i, j, E2M1::from_bits(codes[i * cols + j]));
                }
                for g in 0..groups_per_row(cols) {
                    q.set_scale(i, g, E8M0::from_bits(scales[i * groups_per_row(cols) + g]).unwrap());
                }
            }
            q
        })
    })
}

proptest! {
    #[test]
    fn packing_round_trips(q in arb_tensor()) {
        let bytes = q.serialize();
        prop_assert_eq!(bytes.len(), q.serialized_len());
        prop_assert_eq!(QuantizedTensor::deserialize(&bytes).unwrap(), q);
    }

    #[test]
    fn truncation_is_detected(q in arb_tensor(), cut in 1usize..8) {
        let bytes = q.serialize();
        let keep = bytes.len().saturating_sub(cut);
        prop_assert!(QuantizedTensor::deserialize(&bytes[..keep]).is_err());
    }

    #[test]
    fn rtn_is_monotone(a in -20.0f64..20.0, b in -20.0f64..20.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(rtn_to_grid(lo).unwrap().to_f64() <= rtn_to_grid(hi).unwrap().to_f64());
    }

    #[test]
    fn absmax_rtn_error_is_bounded(v in prop::collection::vec(-1e3f64..1e3, 1..96)) {
        let m = Matrix::from_vec(1, v.len(), v.clone()).unwrap();
        let q = quantize_tensor(&m, absmax_scale, Rounding::Nearest).unwrap();
        let d = q.dequantize();
        for (g, chunk) in v.chunks(GROUP_SIZE).enumerate() {
            let s = q.scale(0, g).to_f64();
            for (k, &x) in chunk.iter().enumerate() {
                let y = d.get(0, g * GROUP_SIZE + k);
                // Grid spacing is at most 2 (between 4 and 6), so half a step is s.
                prop_assert!((x - y).abs() <= s * 1.0 + 1e-12, "{} -> {}", x, y);
                prop_assert!((x / s).abs() <= E2M1_MAX);
            }
        }
    }
}
