use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use quartet::formats::{self, decode_diag_csv, decode_gaps, FitJson};
use quartet_core::quantizers::QuantScheme;
use quartet_core::rng::CounterRng;
use quartet_core::Matrix;
use tempfile::TempDir;

fn quartet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_quartet")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data/records_fixture.csv")
}

fn sample_matrix() -> Matrix {
    Matrix::from_fn(3, 70, |i, j| ((i * 70 + j) as f64 * 0.37).sin() * (1.0 + j as f64 / 9.0))
}

#[test]
fn quantize_then_dequantize_matches_the_library() {
    let dir = TempDir::new().unwrap();
    let input = dir.path().join("x.csv");
    let m = sample_matrix();
    formats::write_matrix(&input, &m).unwrap();
    for (name, scheme) in [("rtn", QuantScheme::RtnAbsMax), ("sr", QuantScheme::SrAbsMax { seed: 9 })] {
        let q = dir.path().join(format!("{name}.mxf4"));
        let o = quartet(&["quantize", s(&input), "--scheme", name, "--seed", "9", "--out", s(&q)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert!(String::from_utf8_lossy(&o.stdout).starts_with("mse "));
        let back = dir.path().join(format!("{name}.csv"));
        let o = quartet(&["dequantize", s(&q), "--out", s(&back)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let expected = scheme.quantize(&m).unwrap().0;
        assert_eq!(formats::read_mxf4(&q).unwrap(), expected);
        assert_eq!(formats::read_matrix(&back).unwrap(), expected.dequantize());
        assert!(!dir.path().join(format!("{name}.mxf4.msk")).exists());
    }
}

#[test]
fn quest_writes_a_mask_sidecar() {
    let dir = TempDir::new().unwrap();
    let input = dir.path().join("x.mat");
    let mut g = CounterRng::new(1).stream(0, 0);
    let m = Matrix::from_fn(4, 320, |_, _| g.next_gaussian());
    formats::write_matrix(&input, &m).unwrap();
    let q = dir.path().join("q.mxf4");
    let o = quartet(&["quantize", s(&input), "--scheme", "quest", "--out", s(&q)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let read_back = formats::read_matrix(&input).unwrap();
    let (expected, clip) = QuantScheme::quest().quantize(&read_back).unwrap();
    assert_eq!(formats::read_mxf4(&q).unwrap(), expected);
    let mask = formats::read_mask(&dir.path().join("q.mxf4.msk")).unwrap();
    assert_eq!(mask, clip);
    assert!(mask.clipped_count() >= 1);

    let custom = dir.path().join("m.bin");
    let o = quartet(&["quantize", s(&input), "--scheme", "rtn", "--mask", s(&custom), "--out", s(&q)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(formats::read_mask(&custom).unwrap().clipped_count(), 0);
}

#[test]
fn io_and_format_errors_exit_3() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("o");
    let o = quartet(&["quantize", s(&dir.path().join("missing.csv")), "--scheme", "rtn", "--out", s(&out)]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("missing.csv"), "{}", stderr(&o));

    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "1,2\n3,oops\n").unwrap();
    let o = quartet(&["quantize", s(&bad), "--scheme", "rtn", "--out", s(&out)]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("row 2"), "{}", stderr(&o));

    let junk = dir.path().join("junk.mxf4");
    std::fs::write(&junk, b"MXF4 but not really").unwrap();
    assert_eq!(code(&quartet(&["dequantize", s(&junk), "--out", s(&out)])), 3);

    let recs = dir.path().join("r.csv");
    std::fs::write(&recs, "n,d,p_fwd,p_bwd,loss\n1e7,2e8,fp8,fp8,3.0\n1e7,2e8,fp8\n").unwrap();
    let o = quartet(&["fit", s(&recs), "--out", s(&out)]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("row 2"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_2() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("o");
    assert_eq!(code(&quartet(&["quantize", "x.csv", "--scheme", "fp2", "--out", "o"])), 2);
    assert_eq!(code(&quartet(&["frobnicate"])), 2);

    let empty = dir.path().join("empty.csv");
    std::fs::write(&empty, "").unwrap();
    assert_eq!(code(&quartet(&["fit", s(&empty), "--out", s(&out)])), 2);
    std::fs::write(&empty, "n,d,p_fwd,p_bwd,loss\n").unwrap();
    assert_eq!(code(&quartet(&["fit", s(&empty), "--out", s(&out)])), 2);

    let fp4_only = dir.path().join("fp4.csv");
    std::fs::write(&fp4_only, "n,d,p_fwd,p_bwd,loss\n1e7,2e8,fp4,fp4,3.0\n").unwrap();
    let o = quartet(&["fit", s(&fp4_only), "--out", s(&out)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("baseline"), "{}", stderr(&o));

    let cfg = dir.path().join("t.cfg");
    std::fs::write(&cfg, "steps = 10\nlearning_rate = 0.1\n").unwrap();
    let o = quartet(&["train", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("t.cfg:2: unknown key `learning_rate`"), "{}", stderr(&o));
}

#[test]
fn bench_is_deterministic_and_matches_known_values() {
    let dir = TempDir::new().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    let args = |out: &Path| {
        quartet(&["bench", "mse", "--scheme", "rtn,sr", "--dim", "4096", "--samples", "64", "--seed", "3", "--out", s(out)])
    };
    assert_eq!(code(&args(&a)), 0);
    assert_eq!(code(&args(&b)), 0);
    let bytes = std::fs::read(&a).unwrap();
    assert_eq!(bytes, std::fs::read(&b).unwrap());
    let rows = decode_diag_csv(&a, &bytes).unwrap();
    assert_eq!(rows.len(), 2);
    let rtn = &rows[0];
    let sr = &rows[1];
    assert_eq!((rtn.scheme.as_str(), sr.scheme.as_str()), ("rtn", "sr"));
    assert!((rtn.value - 1.37e-2).abs() < 0.1 * 1.37e-2, "{}", rtn.value);
    assert!((sr.value - 2.72e-2).abs() < 0.1 * 2.72e-2, "{}", sr.value);

    let j = dir.path().join("m.json");
    let o = quartet(&["bench", "misalignment", "--scheme", "sr", "--dim", "256", "--samples", "4000", "--out", s(&j)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&j).unwrap()).unwrap();
    let row = &v.as_array().unwrap()[0];
    let (m, se) = (row["value"].as_f64().unwrap(), row["stderr"].as_f64().unwrap());
    assert!(m.abs() < 5.0 * se + 1e-3, "sr misalignment {m} +- {se}");
}

#[test]
fn train_writes_curve_and_summary() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("t.cfg");
    std::fs::write(&cfg, "# tiny run\ntask = regression\ninput = 32\noutput = 32\ndims = 32,64,32\nsteps = 30\nlog_every = 10\n").unwrap();
    let curve = dir.path().join("curve.csv");
    let o = quartet(&["train", s(&cfg), "--seed", "4", "--out", s(&curve)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = std::fs::read_to_string(&curve).unwrap();
    assert!(text.starts_with("step,loss,lr\n"), "{text}");
    assert!(text.lines().count() >= 4);
    let summary: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("curve.summary.json")).unwrap()).unwrap();
    assert_eq!(summary["status"], "finished");
    assert_eq!(summary["pair"], "quest-rtn");
    assert!(summary["final_loss"].as_f64().unwrap().is_finite());

    let again = dir.path().join("again.csv");
    assert_eq!(code(&quartet(&["train", s(&cfg), "--seed", "4", "--out", s(&again)])), 0);
    assert_eq!(std::fs::read(&curve).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn divergence_exits_4_after_writing_outputs() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("t.cfg");
    std::fs::write(&cfg, "task = regression\ninput = 32\noutput = 32\ndims = 32,32\npair = exact\nsteps = 50\nlr = 1e300\nwarmup_frac = 0\n").unwrap();
    let curve = dir.path().join("curve.csv");
    let o = quartet(&["train", s(&cfg), "--out", s(&curve)]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    assert!(stderr(&o).contains("diverged"), "{}", stderr(&o));
    let summary: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("curve.summary.json")).unwrap()).unwrap();
    assert_eq!(summary["status"], "diverged");
}

#[test]
fn sweep_reports_zero_gap_for_the_reference_pair() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("s.cfg");
    std::fs::write(&cfg, "task = regression\ninput = 32\noutput = 32\ndims = 32,32,32\npairs = exact, quest-sr\nratios = 0.5\nseeds = 2\nbatch_size = 32\n").unwrap();
    let out = dir.path().join("gaps.csv");
    let o = quartet(&["sweep", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows = decode_gaps(&out, &std::fs::read(&out).unwrap()).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].pair, "exact");
    assert_eq!((rows[0].gap_mean, rows[0].gap_std), (0.0, 0.0));
    assert_eq!(rows[0].steps, 32);
    assert_eq!(rows[1].seeds, 2);
    assert!(rows.iter().all(|r| r.status == "ok"));
}

#[test]
fn fit_recovers_the_fixture_and_feeds_region() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("fit.json");
    let o = quartet(&["fit", s(&fixture()), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: FitJson = formats::decode_json(&out, &std::fs::read(&out).unwrap()).unwrap();
    let p = &report.params;
    for (got, want) in [(p.a, 1.52e5), (p.alpha, 0.589), (p.b, 5.25e5), (p.beta, 0.544), (p.gamma, 0.274), (p.e, 1.35)] {
        assert!((got / want - 1.0).abs() < 0.02, "{got} vs {want}");
    }
    assert!((p.eff_n["fp4"] - 0.65).abs() < 0.02, "{:?}", p.eff_n);
    assert!((p.eff_d["fp4"] - 0.95).abs() < 0.02, "{:?}", p.eff_d);
    assert_eq!(report.residuals.len(), 48);
    assert!(report.stage2.is_some());

    let region = dir.path().join("region.csv");
    let o = quartet(&["region", "--params", s(&out), "--n-points", "3", "--budget-points", "3", "--out", s(&region)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = std::fs::read_to_string(&region).unwrap();
    assert!(text.contains("# speedup fp4:fp8 (2.0,1.0)->1.2\n"), "{text}");
    assert!(text.contains("n_max,budget,best_p_fwd,best_p_bwd,loss\n"), "{text}");
    assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 1 + 9);
}

#[test]
fn default_region_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    assert_eq!(code(&quartet(&["region", "--out", s(&a)])), 0);
    assert_eq!(code(&quartet(&["region", "--out", s(&b)])), 0);
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text, std::fs::read_to_string(&b).unwrap());
    assert!(text.contains("(2.0,1.0)->1.2"));
    assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 1 + 81);
}

#[test]
fn selftest_subset_reports_and_sets_status() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("rep");
    let o = quartet(&["selftest", "--criteria", "1,8", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("PASS  1 ") && stdout.contains("PASS  8 "), "{stdout}");
    assert!(out.join("criterion_01.csv").exists() && out.join("summary.csv").exists());

    assert_eq!(code(&quartet(&["selftest", "--criteria", "14", "--out", s(&out)])), 2);
}
