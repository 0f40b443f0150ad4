//! The thirteen acceptance criteria, one PASS/FAIL line each, with the
//! per-criterion CSV reports written to a temporary directory.

use std::io::Write;

use quartet::selftest;

// Print through the raw handle so the table shows even when output is captured.
fn emit(line: &str) {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{line}").unwrap();
    out.flush().unwrap();
}

#[test]
fn acceptance_criteria() {
    let dir = tempfile::TempDir::new().unwrap();
    emit("");
    let done = selftest::run(0, &selftest::ALL, dir.path(), |c| emit(&c.line())).unwrap();
    let failed: Vec<u8> = done.iter().filter(|c| !c.passed()).map(|c| c.id).collect();
    emit(&format!("{} of {} criteria passed", done.len() - failed.len(), done.len()));
    assert_eq!(done.len(), 13);
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
