//! Command-line interface.
//!
//! Exit status: 0 success, 1 selftest criteria failed, 2 usage, 3 I/O or
//! undecodable file, 4 numeric failure (divergence, degenerate fit).

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use quartet_core::diagnostics::{gaussian_mse_many, gradient_depth_profile, misalignment_many, DiagScheme};
use quartet_core::hadamard::{randomized_hadamard, Axis, HadamardConfig};
use quartet_core::qlinear::{BackwardRounding, LayerConfig};
use quartet_core::quantizers::QuantScheme;
use quartet_core::rng::CounterRng;
use quartet_core::scaling::{
    evaluate_fit, fit_alternative_forms, fit_stage1_with, fit_stage2, optimal_region_grid, FitForm, FitLoss, FitOptions,
    PrecisionId, RunRecord, ScalingLawParams, SpeedupTable, DEFAULT_HUBER_DELTA,
};
use quartet_core::trainkit::{loss_gap_sweep, train, Model, Outcome, SweepSetup, TrainConfig};
use quartet_core::Matrix;
use serde::Serialize;

use crate::config::{SweepSpec, TrainSpec};
use crate::error::{Error, Result};
use crate::formats::{self, DiagRow, FitJson, FitOptionsJson, FormJson, GapRow, ParamsJson, ResidualJson, StageJson};
use crate::selftest;

pub const EXIT_SELFTEST_FAILED: u8 = 1;

#[derive(Debug, Parser)]
#[command(name = "quartet", version, about = "MXFP4 quantization, quantized training and precision scaling laws")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Master seed; all randomness derives from it.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SchemeArg {
    Rtn,
    Sr,
    Quest,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Metric {
    Mse,
    Misalignment,
    DepthProfile,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum LossArg {
    Huber,
    L2,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FormArg {
    Full,
    Gamma1,
    Beta1,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Penalty on the log residuals.
    #[arg(long, value_enum, default_value = "huber")]
    pub loss: LossArg,
    /// Huber threshold.
    #[arg(long, default_value_t = DEFAULT_HUBER_DELTA)]
    pub delta: f64,
    /// Parameters held fixed during stage 1.
    #[arg(long, value_enum, default_value = "full")]
    pub form: FormArg,
    /// Precision id whose efficiencies are pinned at 1; stage 1 uses the
    /// records with this id for both passes.
    #[arg(long, default_value = "fp8")]
    pub baseline: String,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Quantize a matrix (CSV or MAT1) into an MXF4 container.
    Quantize {
        input: PathBuf,
        #[arg(long, value_enum)]
        scheme: SchemeArg,
        /// Apply the randomized Hadamard transform within each row first; the
        /// container then holds Hadamard-domain values.
        #[arg(long)]
        hadamard: bool,
        /// Mask sidecar path; defaults to `<out>.msk`, written for quest.
        #[arg(long)]
        mask: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Decode an MXF4 container to a matrix (`.mat` writes MAT1, else CSV).
    Dequantize {
        input: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Monte Carlo diagnostics as CSV, or JSON for a `.json` output.
    Bench {
        #[arg(value_enum)]
        metric: Metric,
        /// Comma-separated schemes (identity, rtn, sr, quest) or `all`.
        #[arg(long, default_value = "all")]
        scheme: String,
        /// Vector dimension for mse and misalignment.
        #[arg(long, default_value_t = 4096)]
        dim: usize,
        /// Vectors to draw; defaults to 1e6 elements for mse and 1e5
        /// vectors for misalignment.
        #[arg(long)]
        samples: Option<usize>,
        /// Layer widths for depth-profile.
        #[arg(long, value_delimiter = ',', default_values_t = [64, 128, 128, 128, 128, 32])]
        dims: Vec<usize>,
        /// Batch rows for depth-profile.
        #[arg(long, default_value_t = 64)]
        batch: usize,
        /// Seeds averaged by depth-profile.
        #[arg(long, default_value_t = 10)]
        seeds: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Train one model from a key-value config; writes the `step,loss,lr`
    /// curve and a JSON summary.
    Train {
        config: PathBuf,
        /// Summary path; defaults to `<out>` with extension `summary.json`.
        #[arg(long)]
        summary: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Loss gaps against the exact pair over ratios and seeds.
    Sweep {
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Two-stage scaling-law fit of a `n,d,p_fwd,p_bwd,loss` records file.
    Fit {
        records: PathBuf,
        #[command(flatten)]
        fit: FitArgs,
        /// Also fit the gamma=1 and beta=1 forms for comparison.
        #[arg(long)]
        compare_forms: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Optimal precision pair per (model size, data budget) cell.
    Region {
        /// A fit report (or bare parameter object) to evaluate.
        #[arg(long, conflicts_with = "records")]
        params: Option<PathBuf>,
        /// Fit these records first instead of using given parameters.
        #[arg(long)]
        records: Option<PathBuf>,
        /// `p_fwd,p_bwd,s_fwd,s_bwd` CSV; defaults to the bit-operations
        /// model relative to fp8.
        #[arg(long)]
        speedups: Option<PathBuf>,
        /// Pairs to compare as `fwd:bwd`; defaults to every speedup pair.
        #[arg(long, value_delimiter = ',')]
        pairs: Vec<String>,
        #[arg(long, default_value_t = 1e7)]
        n_min: f64,
        #[arg(long, default_value_t = 1e11)]
        n_max: f64,
        #[arg(long, default_value_t = 9)]
        n_points: usize,
        /// Training-token budget range (at baseline speed).
        #[arg(long, default_value_t = 1e9)]
        budget_min: f64,
        #[arg(long, default_value_t = 1e13)]
        budget_max: f64,
        #[arg(long, default_value_t = 9)]
        budget_points: usize,
        #[command(flatten)]
        fit: FitArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Run the acceptance suite and print a pass/fail table.
    Selftest {
        /// Comma-separated criterion numbers; all by default.
        #[arg(long, value_delimiter = ',')]
        criteria: Vec<u8>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Report directory.
        #[arg(long, default_value = "selftest-report")]
        out: PathBuf,
    },
}

/// Runs a parsed command; `Ok` carries the exit status.
pub fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Quantize {
            input,
            scheme,
            hadamard,
            mask,
            common,
        } => quantize(&input, scheme, hadamard, mask, &common),
        Command::Dequantize { input, common } => {
            let q = formats::read_mxf4(&input)?;
            formats::write_matrix(&common.out, &q.dequantize())?;
            Ok(0)
        }
        Command::Bench {
            metric,
            scheme,
            dim,
            samples,
            dims,
            batch,
            seeds,
            common,
        } => bench(metric, &scheme, dim, samples, &dims, batch, seeds, &common),
        Command::Train { config, summary, common } => train_cmd(&config, summary, &common),
        Command::Sweep { config, common } => sweep(&config, &common),
        Command::Fit {
            records,
            fit,
            compare_forms,
            common,
        } => {
            let records = formats::read_records(&records)?;
            let (_, report) = fit_records(&records, &fit, compare_forms)?;
            formats::write_bytes(&common.out, &formats::encode_json(&report))?;
            Ok(0)
        }
        Command::Region {
            params,
            records,
            speedups,
            pairs,
            n_min,
            n_max,
            n_points,
            budget_min,
            budget_max,
            budget_points,
            fit,
            common,
        } => {
            let params = match (params, records) {
                (Some(p), _) => formats::read_params(&p)?,
                (None, Some(r)) => fit_records(&formats::read_records(&r)?, &fit, false)?.0,
                (None, None) => ScalingLawParams::reference_with_fp4(),
            };
            let speedups = match speedups {
                Some(p) => formats::read_speedups(&p)?,
                None => SpeedupTable::bops(),
            };
            let pairs = parse_pairs(&pairs, &speedups)?;
            let n_grid = logspace(n_min, n_max, n_points, "n")?;
            let budget_grid = logspace(budget_min, budget_max, budget_points, "budget")?;
            let cells = optimal_region_grid(&params, &speedups, &pairs, &n_grid, &budget_grid)?;
            formats::write_bytes(&common.out, &formats::encode_region(&cells, &params, &speedups)?)?;
            Ok(0)
        }
        Command::Selftest { criteria, seed, out } => {
            let ids = if criteria.is_empty() { selftest::ALL.to_vec() } else { criteria };
            let done = selftest::run(seed, &ids, &out, |c| println!("{}", c.line()))?;
            let passed = done.iter().filter(|c| c.passed()).count();
            println!("{passed} of {} criteria passed; reports in {}", done.len(), out.display());
            Ok(if passed == done.len() { 0 } else { EXIT_SELFTEST_FAILED })
        }
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s: OsString = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn quantize(input: &Path, scheme: SchemeArg, hadamard: bool, mask: Option<PathBuf>, common: &Common) -> Result<u8> {
    let mut m = formats::read_matrix(input)?;
    if hadamard {
        m = randomized_hadamard(&m, &HadamardConfig::along(Axis::Cols).with_seed(common.seed))?;
    }
    let scheme = match scheme {
        SchemeArg::Rtn => QuantScheme::RtnAbsMax,
        SchemeArg::Sr => QuantScheme::SrAbsMax { seed: common.seed },
        SchemeArg::Quest => QuantScheme::quest(),
    };
    let (q, clip) = scheme.quantize(&m)?;
    formats::write_mxf4(&common.out, &q)?;
    let mask_path = match (mask, scheme) {
        (Some(p), _) => Some(p),
        (None, QuantScheme::Quest(_)) => Some(with_suffix(&common.out, ".msk")),
        (None, _) => None,
    };
    if let Some(p) = mask_path {
        formats::write_mask(&p, &clip)?;
    }
    let d = q.dequantize();
    let mse = m.as_slice().iter().zip(d.as_slice()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / m.as_slice().len() as f64;
    println!("mse {mse:e}");
    println!("clipped {} of {}", clip.clipped_count(), m.as_slice().len());
    Ok(0)
}

fn parse_schemes(list: &str, all: &[DiagScheme]) -> Result<Vec<DiagScheme>> {
    if list == "all" {
        return Ok(all.to_vec());
    }
    Ok(list.split(',').map(|s| DiagScheme::parse(s.trim())).collect::<quartet_core::Result<Vec<_>>>()?)
}

fn write_report(out: &Path, rows: &[DiagRow]) -> Result<()> {
    let bytes = if out.extension().is_some_and(|e| e == "json") {
        formats::encode_json(&rows)
    } else {
        formats::encode_diag_csv(rows)
    };
    formats::write_bytes(out, &bytes)
}

#[allow(clippy::too_many_arguments)]
fn bench(
    metric: Metric,
    scheme: &str,
    dim: usize,
    samples: Option<usize>,
    dims: &[usize],
    batch: usize,
    seeds: usize,
    common: &Common,
) -> Result<u8> {
    let seed = common.seed;
    let rows = match metric {
        Metric::Mse | Metric::Misalignment => {
            let schemes = parse_schemes(scheme, &DiagScheme::ALL)?;
            let (name, est) = if let Metric::Mse = metric {
                let n = samples.unwrap_or_else(|| 1_000_000usize.div_ceil(dim.max(1)));
                ("mse", gaussian_mse_many(&schemes, dim, n, seed)?)
            } else {
                ("misalignment", misalignment_many(&schemes, dim, samples.unwrap_or(100_000), seed)?)
            };
            schemes
                .iter()
                .zip(est)
                .map(|(s, e)| DiagRow {
                    scheme: s.name().into(),
                    metric: name.into(),
                    value: e.value,
                    stderr: e.stderr,
                    samples: e.samples,
                    seed,
                })
                .collect()
        }
        Metric::DepthProfile => depth_profile(scheme, dims, batch, seeds, seed)?,
    };
    write_report(&common.out, &rows)?;
    Ok(0)
}

fn depth_profile(scheme: &str, dims: &[usize], batch: usize, seeds: usize, seed: u64) -> Result<Vec<DiagRow>> {
    if seeds < 1 || batch == 0 || dims.len() < 2 {
        return Err(Error::Usage("depth-profile needs seeds >= 1, batch >= 1 and at least two dims".into()));
    }
    let schemes = parse_schemes(scheme, &[DiagScheme::RtnAbsMax, DiagScheme::SrAbsMax])?;
    let mut rows = Vec::new();
    for s in schemes {
        let rounding = match s {
            DiagScheme::Identity => BackwardRounding::Identity,
            DiagScheme::RtnAbsMax => BackwardRounding::Rtn,
            DiagScheme::SrAbsMax => BackwardRounding::Stochastic,
            DiagScheme::Quest => return Err(Error::Usage("depth-profile varies the backward rounding: identity, rtn or sr".into())),
        };
        let cfg = LayerConfig::quartet().with_backward(rounding);
        let mut cos = vec![Vec::new(); dims.len() - 1];
        let mut mis = vec![Vec::new(); dims.len() - 1];
        for k in 0..seeds as u64 {
            let r = CounterRng::new(seed).derive(&[k]);
            let model = Model::new(dims, r.derive(&[0]).seed())?;
            let mut st = r.stream(0, 1);
            let x = Matrix::from_fn(batch, dims[0], |_, _| st.next_gaussian());
            let g = Matrix::from_fn(batch, dims[dims.len() - 1], |_, _| st.next_gaussian());
            let rep = gradient_depth_profile(&model, &x, &g, &cfg, r.derive(&[1]).seed())?;
            for d in 0..dims.len() - 1 {
                cos[d].push(rep.cosine_by_depth[d]);
                mis[d].push(rep.misalignment_by_depth[d]);
            }
        }
        for (metric, per) in [("cosine", &cos), ("misalignment", &mis)] {
            for (d, v) in per.iter().enumerate() {
                let (mean, se) = mean_se(v);
                rows.push(DiagRow {
                    scheme: s.name().into(),
                    metric: format!("{metric}_depth_{}", d + 1),
                    value: mean,
                    stderr: se,
                    samples: v.len(),
                    seed,
                });
            }
        }
    }
    Ok(rows)
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct TrainSummary {
    pair: String,
    seed: u64,
    steps: usize,
    status: &'static str,
    final_loss: Option<f64>,
    diverged_at: Option<usize>,
    clip_events: usize,
    max_clipped_norm: f64,
}

fn train_cmd(config: &Path, summary: Option<PathBuf>, common: &Common) -> Result<u8> {
    let spec = TrainSpec::parse(&config.display().to_string(), &read_text(config)?)?;
    let cfg = TrainConfig {
        seed: common.seed,
        ..spec.train
    };
    let r = train(Model::new(&spec.dims, common.seed)?, &spec.task, &spec.pair.layer, &cfg)?;
    formats::write_bytes(&common.out, &formats::encode_curve(&r.curve))?;
    let (status, final_loss, diverged_at) = match r.outcome {
        Outcome::Finished { final_loss } => ("finished", Some(final_loss), None),
        Outcome::Diverged { step } => ("diverged", None, Some(step)),
    };
    let s = TrainSummary {
        pair: spec.pair.name.clone(),
        seed: common.seed,
        steps: cfg.steps,
        status,
        final_loss,
        diverged_at,
        clip_events: r.clip_events,
        max_clipped_norm: r.max_clipped_norm,
    };
    let path = summary.unwrap_or_else(|| common.out.with_extension("summary.json"));
    formats::write_bytes(&path, &formats::encode_json(&s))?;
    match diverged_at {
        Some(step) => Err(Error::Numeric(format!("training diverged at step {step}"))),
        None => Ok(0),
    }
}

fn sweep(config: &Path, common: &Common) -> Result<u8> {
    let spec = SweepSpec::parse(&config.display().to_string(), &read_text(config)?)?;
    let setup = SweepSetup {
        dims: spec.dims,
        task: spec.task,
        base: spec.base,
        pairs: spec.pairs,
        ratios: spec.ratios,
        seeds: (common.seed..common.seed + spec.seeds as u64).collect(),
    };
    let cells = loss_gap_sweep(&setup)?;
    let rows: Vec<GapRow> = cells
        .iter()
        .map(|c| GapRow {
            pair: c.pair.clone(),
            ratio: c.ratio,
            steps: c.steps,
            seeds: c.losses.len(),
            diverged: c.diverged,
            gap_mean: c.gap_mean,
            gap_median: c.gap_median,
            gap_std: c.gap_std,
            status: if c.diverged == 0 { "ok" } else { "diverged" }.into(),
        })
        .collect();
    formats::write_bytes(&common.out, &formats::encode_gaps(&rows))?;
    let diverged: usize = rows.iter().map(|r| r.diverged).sum();
    if diverged > 0 {
        return Err(Error::Numeric(format!("{diverged} sweep runs diverged")));
    }
    Ok(0)
}

fn fit_options(a: &FitArgs) -> Result<(FitOptions, String)> {
    let loss = match a.loss {
        LossArg::Huber if a.delta > 0.0 && a.delta.is_finite() => FitLoss::Huber { delta: a.delta },
        LossArg::Huber => return Err(Error::Usage("--delta must be positive".into())),
        LossArg::L2 => FitLoss::Squared,
    };
    let form = match a.form {
        FormArg::Full => FitForm::full(),
        FormArg::Gamma1 => FitForm::gamma_one(),
        FormArg::Beta1 => FitForm::beta_one(),
    };
    let name = form.name.clone();
    Ok((
        FitOptions {
            loss,
            form,
            ..FitOptions::default()
        },
        name,
    ))
}

/// Stage 1 on the baseline records, then stage 2 on all records when any
/// use another precision.
pub fn fit_records(records: &[RunRecord], args: &FitArgs, compare_forms: bool) -> Result<(ScalingLawParams, FitJson)> {
    let (opts, form) = fit_options(args)?;
    let base: Vec<RunRecord> = records
        .iter()
        .filter(|r| r.p_fwd == args.baseline && r.p_bwd == args.baseline)
        .cloned()
        .collect();
    if base.is_empty() {
        return Err(Error::Usage(format!("no records use the baseline precision `{}` for both passes", args.baseline)));
    }
    let s1 = fit_stage1_with(&base, &opts)?;
    let mixed = records.len() > base.len();
    let (params, stage2) = if mixed {
        let s2 = fit_stage2(&s1.params, records, opts.loss)?;
        let st = StageJson {
            objective: s2.objective,
            records: records.len(),
            starts: None,
            evaluations: None,
        };
        (s2.params, Some(st))
    } else {
        (s1.params.clone(), None)
    };
    let (objective, res) = evaluate_fit(&params, records, opts.loss)?;
    let residuals = records
        .iter()
        .zip(res)
        .map(|(r, e)| ResidualJson {
            n: r.n,
            d: r.d,
            p_fwd: r.p_fwd.clone(),
            p_bwd: r.p_bwd.clone(),
            loss: r.loss,
            predicted: r.loss * e.exp(),
            log_residual: e,
        })
        .collect();
    let forms = if compare_forms {
        let all = [FitForm::full(), FitForm::gamma_one(), FitForm::beta_one()];
        fit_alternative_forms(&base, &all, opts.loss)?
            .iter()
            .map(|f| FormJson {
                form: f.form.clone(),
                objective: f.objective,
                params: ParamsJson::from(&f.params),
            })
            .collect()
    } else {
        Vec::new()
    };
    let (loss, delta) = match opts.loss {
        FitLoss::Huber { delta } => ("huber", Some(delta)),
        FitLoss::Squared => ("l2", None),
    };
    let report = FitJson {
        params: ParamsJson::from(&params),
        objective,
        residuals,
        stage1: StageJson {
            objective: s1.objective,
            records: base.len(),
            starts: Some(s1.starts),
            evaluations: Some(s1.evaluations),
        },
        stage2,
        options: FitOptionsJson {
            loss: loss.into(),
            delta,
            form,
            baseline: args.baseline.clone(),
        },
        forms,
    };
    Ok((params, report))
}

fn parse_pairs(list: &[String], speedups: &SpeedupTable) -> Result<Vec<(PrecisionId, PrecisionId)>> {
    if list.is_empty() {
        return Ok(speedups.pairs());
    }
    list.iter()
        .map(|p| match p.split_once(':') {
            Some((f, b)) if !f.is_empty() && !b.is_empty() => Ok((f.to_string(), b.to_string())),
            _ => Err(Error::Usage(format!("pair `{p}` is not `fwd:bwd`"))),
        })
        .collect()
}

fn logspace(lo: f64, hi: f64, n: usize, what: &str) -> Result<Vec<f64>> {
    if !(lo > 0.0 && hi >= lo && hi.is_finite()) || n == 0 || (n == 1 && hi != lo) {
        return Err(Error::Usage(format!("{what} range needs 0 < min <= max and at least one point")));
    }
    if n == 1 {
        return Ok(vec![lo]);
    }
    let (a, b) = (lo.log10(), hi.log10());
    Ok((0..n)
        .map(|k| match k {
            0 => lo,
            k if k == n - 1 => hi,
            k => 10f64.powf(a + (b - a) * k as f64 / (n - 1) as f64),
        })
        .collect())
}
