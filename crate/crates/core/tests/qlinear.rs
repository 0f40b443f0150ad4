use proptest::prelude::*;
use quartet_core::mxfp4::{QuantizedTensor, E2M1, E2M1_GRID, E8M0};
use quartet_core::qlinear::*;
use quartet_core::rng::CounterRng;
use quartet_core::Matrix;

fn gaussian(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut s = CounterRng::new(seed).stream(0, 0);
    Matrix::from_fn(rows, cols, |_, _| s.next_gaussian())
}

fn student_t(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut s = CounterRng::new(seed).stream(0, 0);
    Matrix::from_fn(rows, cols, |_, _| s.next_student_t(2))
}

fn dense_hadamard(g: usize) -> Vec<Vec<f64>> {
    let c = 1.0 / (g as f64).sqrt();
    (0..g)
        .map(|i| (0..g).map(|j| if (i & j).count_ones() % 2 == 0 { c } else { -c }).collect())
        .collect()
}

fn rtn_scalar(a: f64) -> f64 {
    let a = a.min(6.0);
    let mut best = 0;
    for k in 1..8 {
        let (d, db) = ((a - E2M1_GRID[k]).abs(), (a - E2M1_GRID[best]).abs());
        if d < db || (d == db && k % 2 == 0) {
            best = k;
        }
    }
    E2M1_GRID[best]
}

/// Hadamard along rows in blocks of 32, then QuEST per group: the
/// lowest-error power-of-two scale among the AbsMax one and 4 below it.
/// Returns dequantized values and the trust mask.
fn oracle_quest(m: &Matrix) -> (Matrix, Vec<bool>) {
    let h = dense_hadamard(32);
    let mut vals = Matrix::zeros(m.rows(), m.cols());
    let mut mask = vec![true; m.rows() * m.cols()];
    for i in 0..m.rows() {
        for b in 0..m.cols() / 32 {
            let group: Vec<f64> = (0..32).map(|r| (0..32).map(|c| h[r][c] * m.get(i, b * 32 + c)).sum()).collect();
            let absmax = group.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            let mut e0 = -127;
            while absmax / 2f64.powi(e0) > 6.0 {
                e0 += 1;
            }
            let err = |e: i32| -> f64 {
                let s = 2f64.powi(e);
                group.iter().map(|v| (v.abs() - rtn_scalar(v.abs() / s) * s).powi(2)).sum()
            };
            let mut best = e0;
            for e in (e0 - 4..e0).rev() {
                if err(e) < err(best) {
                    best = e;
                }
            }
            let s = 2f64.powi(best);
            for (k, v) in group.iter().enumerate() {
                vals.set(i, b * 32 + k, rtn_scalar(v.abs() / s) * s * v.signum() + 0.0);
                mask[i * m.cols() + b * 32 + k] = (v / s).abs() <= 6.0;
            }
        }
    }
    (vals, mask)
}

#[test]
fn forward_matches_scalar_oracle() {
    for seed in 0..5 {
        let x = gaussian(8, 64, 10 + seed);
        let w = gaussian(16, 64, 20 + seed);
        let cfg = LayerConfig::quartet().with_accumulation(Accumulation::Double);
        let (y, ctx) = forward(&x, &w, &cfg).unwrap();
        let (xq, mx) = oracle_quest(&x);
        let (wq, mw) = oracle_quest(&w);
        assert_eq!(ctx.x.values(), xq);
        assert_eq!(ctx.w.values(), wq);
        assert_eq!(ctx.mask_x.as_slice(), mx.as_slice());
        assert_eq!(ctx.mask_w.as_slice(), mw.as_slice());
        for i in 0..8 {
            for j in 0..16 {
                let want: f64 = (0..64).map(|k| xq.get(i, k) * wq.get(j, k)).sum();
                assert!((y.get(i, j) - want).abs() <= 1e-12 * want.abs().max(1.0));
            }
        }
    }
}

fn random_quantized(rows: usize, cols: usize, r: &CounterRng, tag: u64) -> QuantizedTensor {
    let mut q = QuantizedTensor::zeroed(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            q.set_code(i, j, E2M1::from_bits((r.u64_at(tag as u32, (i * cols + j) as u64) % 16) as u8));
        }
        for g in 0..q.groups_per_row() {
            let e = (r.u64_at(tag as u32 + 1, (i * 64 + g) as u64) % 41) as i32 - 20;
            q.set_scale(i, g, E8M0::from_exponent(e));
        }
    }
    q
}

#[test]
fn double_accumulation_gemm_is_bit_exact_against_triple_loop() {
    let root = CounterRng::new(50);
    for n in 0..50u64 {
        let r = root.derive(&[n]);
        let (m, p) = (1 + (r.u64_at(0, 0) % 24) as usize, 1 + (r.u64_at(0, 1) % 24) as usize);
        let k = 32 * (1 + (r.u64_at(0, 2) % 6) as usize) - (r.u64_at(0, 3) % 2) as usize * 7;
        let a = random_quantized(m, k, &r, 10);
        let b = random_quantized(p, k, &r, 20);
        let got = gemm_lp(
            &a,
            &b,
            &GemmPolicy {
                accumulation: Accumulation::Double,
                operands: OperandPath::Quantized,
            },
        )
        .unwrap();
        for i in 0..m {
            for j in 0..p {
                let mut acc = 0.0f64;
                for t in 0..k {
                    let av = a.code(i, t).to_f64() * a.scale(i, t / 32).to_f64();
                    let bv = b.code(j, t).to_f64() * b.scale(j, t / 32).to_f64();
                    acc += av * bv;
                }
                assert_eq!(got.get(i, j).to_bits(), acc.to_bits(), "instance {n} ({i},{j})");
            }
        }
    }
}

fn exact_cfg() -> LayerConfig {
    let mut cfg = LayerConfig::quartet().with_accumulation(Accumulation::Double);
    cfg.gemm.operands = OperandPath::Exact;
    cfg
}

#[test]
fn identity_quantizer_gradients_match_finite_differences() {
    for n in 0..20u64 {
        let batch = 32 * (1 + n as usize % 2);
        let (inp, out) = (32 * (1 + n as usize % 3), 32 * (1 + (n as usize / 3) % 2));
        let x = gaussian(batch, inp, 1000 + n);
        let w = gaussian(out, inp, 2000 + n);
        let dy = gaussian(batch, out, 3000 + n);
        let cfg = exact_cfg();
        let (_, ctx) = forward(&x, &w, &cfg).unwrap();
        assert!(ctx.mask_x.is_all_true() && ctx.mask_w.is_all_true());
        let (dx, dw) = backward(&dy, &ctx, &cfg, 77 + n).unwrap();
        // L = <dY, X W^T>, differentiated numerically through the exact layer.
        let loss = |x: &Matrix, w: &Matrix| -> f64 {
            let y = forward(x, w, &cfg).unwrap().0;
            y.as_slice().iter().zip(dy.as_slice()).map(|(a, b)| a * b).sum()
        };
        let h = 1e-5;
        let check = |analytic: &Matrix, perturb_x: bool| {
            let r = CounterRng::new(n);
            for t in 0..12u64 {
                let (rows, cols) = analytic.shape();
                let (i, j) = ((r.u64_at(7, 2 * t) as usize) % rows, (r.u64_at(7, 2 * t + 1) as usize) % cols);
                let (mut xp, mut xm, mut wp, mut wm) = (x.clone(), x.clone(), w.clone(), w.clone());
                if perturb_x {
                    xp.set(i, j, x.get(i, j) + h);
                    xm.set(i, j, x.get(i, j) - h);
                } else {
                    wp.set(i, j, w.get(i, j) + h);
                    wm.set(i, j, w.get(i, j) - h);
                }
                let fd = (loss(&xp, &wp) - loss(&xm, &wm)) / (2.0 * h);
                let a = analytic.get(i, j);
                assert!((fd - a).abs() <= 1e-4 * a.abs().max(1.0), "instance {n}: fd {fd} analytic {a}");
            }
        };
        check(&dx, true);
        check(&dw, false);
    }
}

#[test]
fn constants_cancel_exactly_on_the_identity_path() {
    assert_eq!(BACKWARD_PRESCALE * BACKWARD_PRESCALE * BACKWARD_COMPENSATION, 1.0);
    // Without transforms, power-of-two data keeps the scaling and compensation exact.
    let x = Matrix::from_fn(32, 32, |i, j| if i == j { 1.0 } else { 0.0 });
    let w = Matrix::from_fn(32, 32, |i, j| if i == j { 2.0 } else { 0.0 });
    let dy = Matrix::from_fn(32, 32, |i, j| if i == j { 4.0 } else { 0.0 });
    let mut cfg = exact_cfg();
    cfg.hadamard = false;
    let (_, ctx) = forward(&x, &w, &cfg).unwrap();
    let (dx, dw) = backward(&dy, &ctx, &cfg, 3).unwrap();
    assert_eq!(dx, dy.matmul_nt(&w.transpose()).unwrap());
    assert_eq!(dw, dy.transpose().matmul_nt(&x.transpose()).unwrap());
}

fn cosine(a: &Matrix, b: &Matrix) -> f64 {
    let dot: f64 = a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x * y).sum();
    dot / (a.frobenius_norm() * b.frobenius_norm())
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[test]
fn hadamard_improves_gradient_direction_on_heavy_tails() {
    // Reference: identity backward rounding from the same forward state, so
    // only the backward quantization differs between the two arms.
    let (mut dx_cos, mut dw_cos) = ([Vec::new(), Vec::new()], [Vec::new(), Vec::new()]);
    for seed in 0..20u64 {
        let x = student_t(64, 128, 100 + seed);
        let w = gaussian(64, 128, 200 + seed);
        let dy = student_t(64, 64, 300 + seed);
        for (arm, had) in [true, false].into_iter().enumerate() {
            let mut cfg = LayerConfig::quartet();
            cfg.hadamard = had;
            let (_, ctx) = forward(&x, &w, &cfg).unwrap();
            let (dx, dw) = backward(&dy, &ctx, &cfg, seed).unwrap();
            let (dx_ref, dw_ref) = backward(&dy, &ctx, &cfg.with_backward(BackwardRounding::Identity), seed).unwrap();
            dx_cos[arm].push(cosine(&dx, &dx_ref));
            dw_cos[arm].push(cosine(&dw, &dw_ref));
        }
    }
    let [dx_with, dx_without] = dx_cos.map(median);
    let [dw_with, dw_without] = dw_cos.map(median);
    assert!(dx_with > dx_without, "dX: with {dx_with} without {dx_without}");
    assert!(dw_with > dw_without, "dW: with {dw_with} without {dw_without}");
}

#[test]
fn masked_hadamard_coordinates_carry_no_gradient() {
    let x = student_t(32, 64, 5);
    let w = gaussian(32, 64, 6);
    let dy = gaussian(32, 32, 7);
    let cfg = LayerConfig::quartet();
    let (_, mut ctx) = forward(&x, &w, &cfg).unwrap();
    for (i, j) in [(0, 0), (5, 33), (31, 63)] {
        ctx.mask_x.set(i, j, false);
    }
    let (dx_h, _) = backward_hadamard_domain(&dy, &ctx, &cfg, 11).unwrap();
    for (i, j) in [(0, 0), (5, 33), (31, 63)] {
        assert_eq!(dx_h.get(i, j), 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn layer_is_deterministic(seed in any::<u64>(), bwd in 0usize..3) {
        let x = gaussian(32, 64, seed);
        let w = gaussian(32, 64, seed ^ 1);
        let dy = gaussian(32, 32, seed ^ 2);
        let rounding = [BackwardRounding::Identity, BackwardRounding::Rtn, BackwardRounding::Stochastic][bwd];
        let cfg = LayerConfig::quartet().with_backward(rounding);
        let (y1, c1) = forward(&x, &w, &cfg).unwrap();
        let (y2, c2) = forward(&x, &w, &cfg).unwrap();
        prop_assert_eq!(&y1, &y2);
        prop_assert_eq!(backward(&dy, &c1, &cfg, seed).unwrap(), backward(&dy, &c2, &cfg, seed).unwrap());
    }

    #[test]
    fn exact_path_is_a_plain_linear_layer(seed in any::<u64>()) {
        let x = gaussian(32, 96, seed);
        let w = gaussian(64, 96, seed ^ 5);
        let (y, _) = forward(&x, &w, &exact_cfg()).unwrap();
        prop_assert!(y.relative_error(&x.matmul_nt(&w).unwrap()) < 1e-12);
    }
}
