//! The acceptance suite.
//!
//! Each criterion writes `criterion_NN.csv` (`check,measured,target,pass`)
//! and the run writes `summary.csv`. Report files carry no timings, so two
//! runs with the same seed are byte-identical; runtimes are returned next to
//! the checks and compared against each criterion's budget by the caller.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use quartet_core::diagnostics::{gaussian_mse_many, misalignment_many, DiagScheme};
use quartet_core::hadamard::{
    hadamard_blockwise, inverse_randomized_hadamard, randomized_hadamard, sign_vector, Axis, HadamardConfig,
};
use quartet_core::mxfp4::{absmax_scale, quantize_tensor, QuantizedTensor, Rounding, E2M1, E8M0};
use quartet_core::qlinear::{
    backward, forward, gemm_lp, Accumulation, GemmPolicy, LayerConfig, OperandPath, BACKWARD_COMPENSATION,
    BACKWARD_PRESCALE,
};
use quartet_core::quantizers::quantize_sr_absmax;
use quartet_core::rng::CounterRng;
use quartet_core::scaling::{eval_loss, fit_stage1, fit_stage2, training_speedup, FitLoss, RunRecord, ScalingLawParams};
use quartet_core::trainkit::{median, train, Model, Outcome, SchemePair, Task, TrainConfig};
use quartet_core::Matrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::formats::write_bytes;

const GOLDEN_3X40: &[u8] = include_bytes!("../data/rtn_3x40.mxf4");

pub const ALL: [u8; 13] = [1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13];

pub fn title(id: u8) -> &'static str {
    match id {
        1 => "codec exactness",
        2 => "gaussian mse",
        3 => "misalignment",
        4 => "sr unbiasedness",
        5 => "hadamard properties",
        6 => "gradient vs finite differences",
        7 => "gemm oracle",
        8 => "speedup model",
        9 => "scaling-law evaluation",
        10 => "fit recovery",
        11 => "backward-rounding ordering",
        12 => "stability",
        13 => "determinism",
        _ => "unknown",
    }
}

pub fn budget(id: u8) -> Option<Duration> {
    let s = match id {
        1 => 1,
        2 | 4 | 7 => 30,
        3 | 6 => 60,
        5 => 10,
        10 => 120,
        11 => 600,
        _ => return None,
    };
    Some(Duration::from_secs(s))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub check: String,
    pub measured: String,
    pub target: String,
    pub pass: bool,
}

impl Check {
    fn new(check: impl Into<String>, measured: impl Into<String>, target: impl Into<String>, pass: bool) -> Self {
        Self {
            check: check.into(),
            measured: measured.into(),
            target: target.into(),
            pass,
        }
    }

    fn within_rel(check: &str, measured: f64, target: f64, rel: f64) -> Self {
        let pass = (measured - target).abs() <= rel * target.abs();
        Self::new(check, format!("{measured:.6e}"), format!("{target:.4e} +- {}%", rel * 100.0), pass)
    }

    fn at_most(check: &str, measured: f64, bound: f64) -> Self {
        Self::new(check, format!("{measured:.6e}"), format!("<= {bound:e}"), measured <= bound)
    }

    fn count(check: &str, failures: usize, total: usize) -> Self {
        Self::new(check, format!("{failures} of {total} failed"), "0 failed", failures == 0)
    }
}

#[derive(Debug, Clone)]
pub struct Criterion {
    pub id: u8,
    pub checks: Vec<Check>,
    pub elapsed: Duration,
}

impl Criterion {
    pub fn title(&self) -> &'static str {
        title(self.id)
    }

    pub fn checks_pass(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(|c| c.pass)
    }

    pub fn within_budget(&self) -> bool {
        budget(self.id).map_or(true, |b| self.elapsed <= b)
    }

    pub fn passed(&self) -> bool {
        self.checks_pass() && self.within_budget()
    }

    /// One table line: status, id, title, runtime against budget, then the
    /// failing checks if any.
    pub fn line(&self) -> String {
        let status = if self.passed() { "PASS" } else { "FAIL" };
        let time = match budget(self.id) {
            Some(b) => format!("{:.2} s (budget {} s)", self.elapsed.as_secs_f64(), b.as_secs()),
            None => format!("{:.2} s", self.elapsed.as_secs_f64()),
        };
        let mut s = format!("{status} {:>2} {:<32} {time}", self.id, self.title());
        for c in self.checks.iter().filter(|c| !c.pass) {
            s.push_str(&format!("\n        {}: measured {}, target {}", c.check, c.measured, c.target));
        }
        if !self.within_budget() {
            s.push_str("\n        over the runtime budget");
        }
        s
    }
}

fn sub_seed(seed: u64, id: u8) -> u64 {
    CounterRng::new(seed).derive(&[u64::from(id)]).seed()
}

fn gaussian(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut s = CounterRng::new(seed).stream(0, 0);
    Matrix::from_fn(rows, cols, |_, _| s.next_gaussian())
}

fn report_name(id: u8) -> String {
    format!("criterion_{id:02}.csv")
}

fn checks_csv(checks: &[Check]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for c in checks {
        w.serialize(c).expect("writing CSV to memory");
    }
    w.into_inner().expect("writing CSV to memory")
}

#[derive(Serialize)]
struct SummaryRow<'a> {
    criterion: u8,
    title: &'a str,
    checks_passed: usize,
    checks_total: usize,
    status: &'a str,
}

fn summary_csv(done: &[Criterion]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for c in done {
        w.serialize(SummaryRow {
            criterion: c.id,
            title: c.title(),
            checks_passed: c.checks.iter().filter(|k| k.pass).count(),
            checks_total: c.checks.len(),
            status: if c.checks_pass() { "pass" } else { "fail" },
        })
        .expect("writing CSV to memory");
    }
    w.into_inner().expect("writing CSV to memory")
}

/// Training runs shared by criteria 11 and 12.
struct Runs {
    /// `(pair, seed, outcome, weights and curve finite)`.
    runs: Vec<(String, u64, Outcome, bool)>,
}

#[derive(Default)]
struct Cache {
    runs: Option<Runs>,
}

/// Runs criteria `ids` (in ascending order) with reports under `out`.
/// `on_done` sees each criterion as it finishes. Criterion 13 re-runs every
/// other selected criterion into `out/rerun` and compares the files.
pub fn run(seed: u64, ids: &[u8], out: &Path, mut on_done: impl FnMut(&Criterion)) -> Result<Vec<Criterion>> {
    let mut ids: Vec<u8> = ids.to_vec();
    ids.sort_unstable();
    ids.dedup();
    if let Some(bad) = ids.iter().find(|i| !ALL.contains(i)) {
        return Err(Error::Usage(format!("no criterion {bad}; criteria are 1 to 13")));
    }
    let rest: Vec<u8> = ids.iter().copied().filter(|&i| i != 13).collect();
    let done = run_set(seed, &rest, out, &mut on_done)?;
    let mut all = done;
    if ids.contains(&13) {
        let start = Instant::now();
        let rerun = out.join("rerun");
        run_set(seed, &rest, &rerun, &mut |_| {})?;
        let mut names: Vec<String> = rest.iter().map(|&i| report_name(i)).collect();
        names.push("summary.csv".into());
        let mut checks = Vec::new();
        for name in names {
            let a = fs::read(out.join(&name)).map_err(|e| Error::io(out.join(&name), e))?;
            let b = fs::read(rerun.join(&name)).map_err(|e| Error::io(rerun.join(&name), e))?;
            let same = a == b;
            let what = if same { "identical" } else { "differs" };
            checks.push(Check::new(format!("{name} byte-identical"), format!("{what} ({} bytes)", a.len()), "identical", same));
        }
        fs::remove_dir_all(&rerun).map_err(|e| Error::io(&rerun, e))?;
        let c = Criterion {
            id: 13,
            checks,
            elapsed: start.elapsed(),
        };
        write_bytes(&out.join(report_name(13)), &checks_csv(&c.checks))?;
        on_done(&c);
        all.push(c);
        write_bytes(&out.join("summary.csv"), &summary_csv(&all))?;
    }
    Ok(all)
}

fn run_set(seed: u64, ids: &[u8], out: &Path, on_done: &mut dyn FnMut(&Criterion)) -> Result<Vec<Criterion>> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut cache = Cache::default();
    let mut done = Vec::new();
    for &id in ids {
        let start = Instant::now();
        let checks = evaluate(id, seed, &mut cache)?;
        let c = Criterion {
            id,
            checks,
            elapsed: start.elapsed(),
        };
        write_bytes(&out.join(report_name(id)), &checks_csv(&c.checks))?;
        on_done(&c);
        done.push(c);
    }
    write_bytes(&out.join("summary.csv"), &summary_csv(&done))?;
    Ok(done)
}

fn evaluate(id: u8, seed: u64, cache: &mut Cache) -> Result<Vec<Check>> {
    let s = sub_seed(seed, id);
    match id {
        1 => codec(),
        2 => gaussian_mse(s),
        3 => misalignment(s),
        4 => sr_unbiased(s),
        5 => hadamard(s),
        6 => finite_differences(s),
        7 => gemm(s),
        8 => speedup(),
        9 => scaling_eval(),
        10 => fit_recovery(),
        11 => ordering(training_runs(seed, cache)?),
        12 => stability(training_runs(seed, cache)?),
        _ => unreachable!("criterion ids checked by run"),
    }
}

/// Independent E2M1 decoder: sign, two exponent bits, one mantissa bit,
/// exponent field 0 subnormal.
fn e2m1_oracle(bits: u8) -> f64 {
    let (e, m) = ((bits >> 1) & 3, f64::from(bits & 1));
    let mag = if e == 0 { 0.5 * m } else { f64::from(1u32 << e) / 2.0 * (1.0 + 0.5 * m) };
    if bits & 8 != 0 {
        -mag
    } else {
        mag
    }
}

fn codec() -> Result<Vec<Check>> {
    let mut failures = 0;
    for e in -16..16 {
        let scale = E8M0::from_exponent(e);
        let p = 2f64.powi(e);
        for bits in 0..16u8 {
            let v = e2m1_oracle(bits) * p;
            let decoded = E2M1::from_bits(bits).to_f64() * scale.to_f64();
            // Element 1 pins the absmax scale to exactly 2^e.
            let mut row = vec![0.0; 32];
            row[0] = v;
            row[1] = 6.0 * p;
            let q = quantize_tensor(&Matrix::from_vec(1, 32, row)?, absmax_scale, Rounding::Nearest)?;
            let canonical = if bits == 0x8 { 0 } else { bits };
            let bytes = q.serialize();
            let back = QuantizedTensor::deserialize(&bytes)?;
            let ok = decoded.to_bits() == v.to_bits()
                && q.scale(0, 0) == scale
                && q.code(0, 0).bits() == canonical
                && q.dequantize().get(0, 0).to_bits() == (v + 0.0).to_bits()
                && back == q
                && back.serialize() == bytes;
            failures += usize::from(!ok);
        }
    }
    let mut checks = vec![Check::count("16 codes x 32 exponents round trip", failures, 512)];

    // absmax 3 needs scale 2^-1; 1.5 -> code 5 (3.0), -3.0 -> code 0xF (-6.0).
    let want: [u8; 20] = [
        b'M', b'X', b'F', b'4', 1, 0, 1, 0, 0, 0, 2, 0, 0, 0, 32, 0, 0, 0, 0xF5, 0x7E,
    ];
    let q = quantize_tensor(&Matrix::from_vec(1, 2, vec![1.5, -3.0])?, absmax_scale, Rounding::Nearest)?;
    let got = q.serialize();
    checks.push(Check::new("hand-derived 1x2 container", hex(&got), hex(&want), got == want));

    let m = Matrix::from_fn(3, 40, |i, j| (((i * 40 + j) * 7 % 23) as f64 - 11.0) * 0.37 * [0.5, 1.0, 2.0][i]);
    let got = quantize_tensor(&m, absmax_scale, Rounding::Nearest)?.serialize();
    let same = got == GOLDEN_3X40;
    checks.push(Check::new(
        "frozen 3x40 golden file",
        if same { "identical" } else { "differs" },
        format!("{} bytes identical", GOLDEN_3X40.len()),
        same,
    ));
    Ok(checks)
}

fn hex(b: &[u8]) -> String {
    b.iter().map(|x| format!("{x:02x}")).collect()
}

fn gaussian_mse(seed: u64) -> Result<Vec<Check>> {
    // 245 vectors of 4096 = 1,003,520 elements.
    let schemes = [DiagScheme::RtnAbsMax, DiagScheme::SrAbsMax, DiagScheme::Quest];
    let est = gaussian_mse_many(&schemes, 4096, 245, seed)?;
    let (rtn, sr, quest) = (est[0].value, est[1].value, est[2].value);
    Ok(vec![
        Check::within_rel("rtn-absmax mse", rtn, 1.37e-2, 0.2),
        Check::within_rel("sr-absmax mse", sr, 2.77e-2, 0.2),
        Check::within_rel("quest mse", quest, 1.32e-2, 0.2),
        Check::new(
            "ordering quest <= rtn < sr",
            format!("{quest:.6e} {rtn:.6e} {sr:.6e}"),
            "non-decreasing, strict at the end",
            quest <= rtn && rtn < sr,
        ),
    ])
}

fn misalignment(seed: u64) -> Result<Vec<Check>> {
    let schemes = [DiagScheme::SrAbsMax, DiagScheme::RtnAbsMax, DiagScheme::Quest];
    let est = misalignment_many(&schemes, 4096, 100_000, seed)?;
    let z = est[0].z_score(0.0);
    Ok(vec![
        Check::new(
            "sr misalignment within 3 se of 0",
            format!("{:.6e} +- {:.3e} (z {z:.3})", est[0].value, est[0].stderr),
            "|z| <= 3",
            z <= 3.0,
        ),
        Check::within_rel("rtn-absmax misalignment", est[1].value, 9.3e-3, 0.3),
        Check::within_rel("quest misalignment", est[2].value, 1.3e-2, 0.3),
    ])
}

fn sr_unbiased(seed: u64) -> Result<Vec<Check>> {
    // Each scalar input shares its group with 6 * 2^k, which pins the scale
    // to 2^k so x / 2^k covers the whole grid range.
    let root = CounterRng::new(seed);
    let draws = 100_000u64;
    let (mut failures, mut worst) = (0, 0.0f64);
    for n in 0..100u64 {
        let k = (root.u64_at(2, n) % 7) as i32 - 3;
        let s = 2f64.powi(k);
        let x = (2.0 * root.uniform_at(3, n) - 1.0) * 6.0 * s;
        let m = Matrix::from_vec(1, 2, vec![x, 6.0 * s])?;
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        for d in 0..draws {
            let v = quantize_sr_absmax(&m, root.derive(&[n, d]).seed())?.0.dequantize().get(0, 0);
            sum += v;
            sum_sq += v * v;
        }
        let mean = sum / draws as f64;
        let se = ((sum_sq / draws as f64 - mean * mean).max(0.0) / draws as f64).sqrt();
        let z = if se == 0.0 {
            if mean == x {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            (mean - x).abs() / se
        };
        worst = worst.max(z);
        failures += usize::from(z > 3.0);
    }
    Ok(vec![
        Check::count("inputs with |mean - x| > 3 se over 1e5 draws", failures, 100),
        Check::new("largest z", format!("{worst:.3}"), "<= 3", worst <= 3.0),
    ])
}

/// Normalized Sylvester matrix from `[[H, H], [H, -H]]`.
fn dense_hadamard(g: usize) -> Vec<Vec<f64>> {
    let mut h = vec![vec![1.0]];
    while h.len() < g {
        let n = h.len();
        let mut next = vec![vec![0.0; 2 * n]; 2 * n];
        for i in 0..n {
            for j in 0..n {
                next[i][j] = h[i][j];
                next[i][j + n] = h[i][j];
                next[i + n][j] = h[i][j];
                next[i + n][j + n] = -h[i][j];
            }
        }
        h = next;
    }
    let c = 1.0 / (g as f64).sqrt();
    h.into_iter().map(|r| r.into_iter().map(|v| v * c).collect()).collect()
}

/// Row-wise `x -> H diag(d) x` per block by dense multiplication.
fn dense_blockwise(m: &Matrix, g: usize, signs: Option<u64>) -> Matrix {
    let h = dense_hadamard(g);
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for b in 0..m.cols() / g {
        let mut d = vec![false; g];
        if let Some(seed) = signs {
            sign_vector(seed, b, &mut d);
        }
        for i in 0..m.rows() {
            for r in 0..g {
                let mut acc = 0.0;
                for c in 0..g {
                    let x = m.get(i, b * g + c);
                    acc += h[r][c] * if d[c] { -x } else { x };
                }
                out.set(i, b * g + r, acc);
            }
        }
    }
    out
}

fn hadamard(seed: u64) -> Result<Vec<Check>> {
    let root = CounterRng::new(seed);
    let (mut inv, mut norm, mut dense, mut cancel) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for n in 0..100u64 {
        let r = root.derive(&[n]);
        let g = 2usize << (r.u64_at(1, 0) % 8);
        let rows = 1 + (r.u64_at(1, 1) % 12) as usize;
        let blocks = 1 + (r.u64_at(1, 2) % 3) as usize;
        let a = gaussian(rows, blocks * g, r.derive(&[0]).seed());
        let b = gaussian(rows + 3, blocks * g, r.derive(&[1]).seed());
        let cfg = HadamardConfig::along(Axis::Cols).with_block_size(g).with_seed(r.u64_at(1, 3));

        let once = hadamard_blockwise(&a, &cfg)?;
        inv = inv.max(hadamard_blockwise(&once, &cfg)?.relative_error(&a));
        let ra = randomized_hadamard(&a, &cfg)?;
        let an = a.frobenius_norm();
        norm = norm.max((once.frobenius_norm() / an - 1.0).abs()).max((ra.frobenius_norm() / an - 1.0).abs());
        dense = dense
            .max(once.relative_error(&dense_blockwise(&a, g, None)))
            .max(ra.relative_error(&dense_blockwise(&a, g, Some(cfg.seed))));
        inv = inv.max(inverse_randomized_hadamard(&ra, &cfg)?.relative_error(&a));
        // Same seed along the contraction axis: Ĥ(A) Ĥ(B)^T = A B^T.
        let rb = randomized_hadamard(&b, &cfg)?;
        cancel = cancel.max(ra.matmul_nt(&rb)?.relative_error(&a.matmul_nt(&b)?));
    }
    Ok(vec![
        Check::at_most("involution / inverse, max relative error", inv, 1e-10),
        Check::at_most("norm preservation, max relative deviation", norm, 1e-10),
        Check::at_most("dense oracle, max relative error", dense, 1e-10),
        Check::at_most("seed cancellation, max relative frobenius", cancel, 1e-8),
    ])
}

fn finite_differences(seed: u64) -> Result<Vec<Check>> {
    // Identity quantizers with transforms, masks and the 3/4, 16/9
    // constants all still applied.
    let mut cfg = LayerConfig::quartet().with_accumulation(Accumulation::Double);
    cfg.gemm.operands = OperandPath::Exact;
    let root = CounterRng::new(seed);
    let (mut worst, mut masks_ok) = (0.0f64, true);
    let h = 1e-5;
    for n in 0..20u64 {
        let r = root.derive(&[n]);
        let batch = 32 * (1 + n as usize % 2);
        let (inp, out) = (32 * (1 + n as usize % 3), 32 * (1 + (n as usize / 3) % 2));
        let x = gaussian(batch, inp, r.derive(&[0]).seed());
        let w = gaussian(out, inp, r.derive(&[1]).seed());
        let dy = gaussian(batch, out, r.derive(&[2]).seed());
        let (_, ctx) = forward(&x, &w, &cfg)?;
        masks_ok &= ctx.mask_x.is_all_true() && ctx.mask_w.is_all_true();
        let (dx, dw) = backward(&dy, &ctx, &cfg, r.derive(&[3]).seed())?;
        // L = <dY, Y(X, W)>, so dL/dX = dX and dL/dW = dW.
        let loss = |x: &Matrix, w: &Matrix| -> Result<f64> {
            let y = forward(x, w, &cfg)?.0;
            Ok(y.as_slice().iter().zip(dy.as_slice()).map(|(a, b)| a * b).sum())
        };
        for (analytic, wrt_x) in [(&dx, true), (&dw, false)] {
            let (rows, cols) = analytic.shape();
            for t in 0..32u64 {
                let (i, j) = ((r.u64_at(7, 2 * t) as usize) % rows, (r.u64_at(7, 2 * t + 1) as usize) % cols);
                let (mut xp, mut xm, mut wp, mut wm) = (x.clone(), x.clone(), w.clone(), w.clone());
                if wrt_x {
                    xp.set(i, j, x.get(i, j) + h);
                    xm.set(i, j, x.get(i, j) - h);
                } else {
                    wp.set(i, j, w.get(i, j) + h);
                    wm.set(i, j, w.get(i, j) - h);
                }
                let fd = (loss(&xp, &wp)? - loss(&xm, &wm)?) / (2.0 * h);
                let a = analytic.get(i, j);
                worst = worst.max((fd - a).abs() / a.abs().max(1.0));
            }
        }
    }
    // Without transforms and with power-of-two data the constants must
    // cancel to the exact gradients.
    let mut plain = cfg;
    plain.hadamard = false;
    let eye = |c: f64| Matrix::from_fn(32, 32, |i, j| if i == j { c } else { 0.0 });
    let (x, w, dy) = (eye(1.0), eye(2.0), eye(4.0));
    let (_, ctx) = forward(&x, &w, &plain)?;
    let (dx, dw) = backward(&dy, &ctx, &plain, 0)?;
    let exact_consts = dx == dy.matmul_nt(&w.transpose())? && dw == dy.transpose().matmul_nt(&x.transpose())?;
    let product = BACKWARD_PRESCALE * BACKWARD_PRESCALE * BACKWARD_COMPENSATION;
    Ok(vec![
        Check::at_most("dX, dW vs central differences, max relative error", worst, 1e-4),
        Check::new("masks all-true on the identity path", masks_ok.to_string(), "true", masks_ok),
        Check::new("(3/4)^2 (16/9)", format!("{product:?}"), "1.0", product == 1.0),
        Check::new("constants cancel exactly end to end", exact_consts.to_string(), "true", exact_consts),
    ])
}

fn random_quantized(rows: usize, cols: usize, r: &CounterRng, tag: u32) -> QuantizedTensor {
    let mut q = QuantizedTensor::zeroed(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            q.set_code(i, j, E2M1::from_bits((r.u64_at(tag, (i * cols + j) as u64) % 16) as u8));
        }
        for g in 0..q.groups_per_row() {
            let e = (r.u64_at(tag + 1, (i * 64 + g) as u64) % 41) as i32 - 20;
            q.set_scale(i, g, E8M0::from_exponent(e));
        }
    }
    q
}

fn gemm(seed: u64) -> Result<Vec<Check>> {
    let root = CounterRng::new(seed);
    let policy = GemmPolicy {
        accumulation: Accumulation::Double,
        operands: OperandPath::Quantized,
    };
    let mut failures = 0;
    for n in 0..50u64 {
        let r = root.derive(&[n]);
        let (m, p) = (1 + (r.u64_at(0, 0) % 24) as usize, 1 + (r.u64_at(0, 1) % 24) as usize);
        let k = 32 * (1 + (r.u64_at(0, 2) % 6) as usize) - (r.u64_at(0, 3) % 2) as usize * 7;
        let a = random_quantized(m, k, &r, 10);
        let b = random_quantized(p, k, &r, 20);
        let got = gemm_lp(&a, &b, &policy)?;
        let mut ok = true;
        for i in 0..m {
            for j in 0..p {
                let mut acc = 0.0f64;
                for t in 0..k {
                    let av = e2m1_oracle(a.code(i, t).bits()) * 2f64.powi(a.scale(i, t / 32).exponent());
                    let bv = e2m1_oracle(b.code(j, t).bits()) * 2f64.powi(b.scale(j, t / 32).exponent());
                    acc += av * bv;
                }
                ok &= got.get(i, j).to_bits() == acc.to_bits();
            }
        }
        failures += usize::from(!ok);
    }
    Ok(vec![Check::count("instances bit-identical to the triple loop", failures, 50)])
}

fn speedup() -> Result<Vec<Check>> {
    [(1.0, 1.0, 1.0), (2.0, 1.0, 1.2), (1.0, 2.0, 1.5), (2.0, 2.0, 2.0)]
        .iter()
        .map(|&(f, b, want)| {
            let got = training_speedup(f, b)?;
            Ok(Check::new(format!("s_train({f:?}, {b:?})"), format!("{got:?}"), format!("{want:?} exactly"), got == want))
        })
        .collect()
}

fn scaling_eval() -> Result<Vec<Check>> {
    let p = ScalingLawParams::reference();
    let axis: Vec<f64> = (0..20).map(|k| 10f64.powf(7.0 + 5.0 * k as f64 / 19.0)).collect();
    let mut violations = 0;
    for (i, &n) in axis.iter().enumerate() {
        for (j, &d) in axis.iter().enumerate() {
            let l = eval_loss(&p, n, d, "fp8", "fp8")?;
            if i + 1 < axis.len() {
                violations += usize::from(eval_loss(&p, axis[i + 1], d, "fp8", "fp8")? >= l);
            }
            if j + 1 < axis.len() {
                violations += usize::from(eval_loss(&p, n, axis[j + 1], "fp8", "fp8")? >= l);
            }
        }
    }
    let excess = eval_loss(&p, 1e15, 1e15, "fp8", "fp8")? - p.e;
    Ok(vec![
        Check::count("strict decrease along N and D on a 20x20 log grid 1e7..1e12", violations, 2 * 20 * 19),
        Check::at_most("L(1e15, 1e15) - E", excess, 1e-3),
    ])
}

fn grid_records(params: &ScalingLawParams, p_fwd: &str, p_bwd: &str) -> Result<Vec<RunRecord>> {
    let mut v = Vec::new();
    for n in [3e7, 5e7, 1e8, 2e8] {
        for ratio in [25.0, 50.0, 100.0, 200.0, 400.0, 800.0] {
            v.push(RunRecord::new(n, n * ratio, p_fwd, p_bwd, eval_loss(params, n, n * ratio, p_fwd, p_bwd)?));
        }
    }
    Ok(v)
}

fn fit_recovery() -> Result<Vec<Check>> {
    let truth = ScalingLawParams::reference_with_fp4();
    let log_err = |a: f64, b: f64| (a.ln() - b.ln()).abs();
    let s1 = fit_stage1(&grid_records(&truth, "fp8", "fp8")?)?;
    let mut checks: Vec<Check> = ["A", "alpha", "B", "beta", "gamma", "E"]
        .iter()
        .zip(s1.params.core().iter().zip(truth.core()))
        .map(|(name, (&got, want))| {
            let e = log_err(got, want);
            Check::new(format!("stage 1 {name}"), format!("{got:.6e} (log error {e:.2e})"), format!("{want:e} within 0.02 in log"), e <= 0.02)
        })
        .collect();
    let s2 = fit_stage2(&s1.params, &grid_records(&truth, "fp4", "fp4")?, FitLoss::default())?;
    for (name, got, want) in [
        ("stage 2 eff_N(fp4)", s2.params.eff_n("fp4")?, 0.65),
        ("stage 2 eff_D(fp4)", s2.params.eff_d("fp4")?, 0.95),
    ] {
        let e = log_err(got, want);
        checks.push(Check::new(name, format!("{got:.6} (log error {e:.2e})"), format!("{want} within 0.02 in log"), e <= 0.02));
    }
    Ok(checks)
}

fn training_runs(seed: u64, cache: &mut Cache) -> Result<&Runs> {
    if cache.runs.is_none() {
        let task = Task::default_task();
        let dims = Task::default_dims();
        let mut runs = Vec::new();
        for pair in [SchemePair::exact(), SchemePair::quartet(), SchemePair::quartet_sr()] {
            for s in seed..seed + 5 {
                let cfg = TrainConfig {
                    seed: s,
                    ..TrainConfig::default()
                };
                let r = train(Model::new(&dims, s)?, &task, &pair.layer, &cfg)?;
                let finite = r.model.is_finite() && r.curve.iter().all(|p| p.loss.is_finite());
                runs.push((pair.name.clone(), s, r.outcome, finite));
            }
        }
        cache.runs = Some(Runs { runs });
    }
    Ok(cache.runs.as_ref().expect("just filled"))
}

fn median_final(runs: &Runs, pair: &str) -> f64 {
    let v: Vec<f64> = runs
        .runs
        .iter()
        .filter(|r| r.0 == pair)
        .map(|r| r.2.final_loss().unwrap_or(f64::INFINITY))
        .collect();
    median(&v)
}

fn ordering(runs: &Runs) -> Result<Vec<Check>> {
    let (exact, rtn, sr) = (median_final(runs, "exact"), median_final(runs, "quest-rtn"), median_final(runs, "quest-sr"));
    let gap = (rtn - exact) / exact;
    Ok(vec![
        Check::new(
            "median final loss exact <= quest-rtn <= quest-sr",
            format!("{exact:.6} {rtn:.6} {sr:.6}"),
            "non-decreasing",
            exact <= rtn && rtn <= sr,
        ),
        Check::at_most("relative gap quest-rtn vs exact", gap, 0.15),
    ])
}

fn stability(runs: &Runs) -> Result<Vec<Check>> {
    let quartet: Vec<_> = runs.runs.iter().filter(|r| r.0 == "quest-rtn").collect();
    let bad = quartet
        .iter()
        .filter(|r| !r.3 || !matches!(r.2, Outcome::Finished { final_loss } if final_loss.is_finite()))
        .count();
    Ok(vec![Check::count("quest-rtn runs with non-finite weights or losses", bad, quartet.len())])
}

/// Default report directory for `selftest`.
pub fn default_out() -> PathBuf {
    PathBuf::from("selftest-report")
}
