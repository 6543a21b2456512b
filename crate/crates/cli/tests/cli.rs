use std::path::Path;
use std::process::Command;

use frac_afem::experiments::{estimate_rate, read_records, SummaryRow, RATE_WINDOW};
use frac_afem::mesh::BaseMesh;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_frac-afem"))
}

fn run_bessel(out: &Path, threads: Option<&str>) -> std::process::Output {
    let mut cmd = bin();
    cmd.args(["run", "--experiment", "bessel_1d", "--s", "0.5", "--budget", "1500", "--out"])
        .arg(out);
    if let Some(t) = threads {
        cmd.env("FRAC_AFEM_THREADS", t);
    }
    cmd.output().unwrap()
}

#[test]
fn budget_stop_writes_logs_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_bessel(dir.path(), None);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));

    let records = read_records(&dir.path().join("bessel_1d_s0.5.csv")).unwrap();
    assert!(records.len() > 4);
    assert!(records.iter().all(|r| r.dofs <= 1500));
    for w in records[2..].windows(2) {
        assert!(w[1].error < w[0].error, "error grew at iteration {}", w[1].iter);
    }

    let mut rd = csv::Reader::from_path(dir.path().join("bessel_1d_summary.csv")).unwrap();
    let rows: Vec<SummaryRow> = rd.deserialize().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].rate_error.to_bits(), estimate_rate(&records, RATE_WINDOW).unwrap().to_bits());
    assert_eq!(rows[0].stop, "budget");
}

#[test]
fn thread_count_does_not_change_results() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_bessel(a.path(), Some("1"));
    run_bessel(b.path(), Some("3"));
    let ra = read_records(&a.path().join("bessel_1d_s0.5.csv")).unwrap();
    let rb = read_records(&b.path().join("bessel_1d_s0.5.csv")).unwrap();
    assert_eq!(ra.len(), rb.len());
    for (x, y) in ra.iter().zip(&rb) {
        assert_eq!(x.dofs, y.dofs);
        assert_eq!(x.error.to_bits(), y.error.to_bits());
        assert_eq!(x.tau.to_bits(), y.tau.to_bits());
    }
}

#[test]
fn rate_reports_fitted_slope() {
    let dir = tempfile::tempdir().unwrap();
    run_bessel(dir.path(), None);
    let file = dir.path().join("bessel_1d_s0.5.csv");
    let out = bin().arg("rate").arg("--in").arg(&file).args(["--window", "5"]).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let line = text.lines().find(|l| l.starts_with("error rate:")).unwrap();
    let printed: f64 = line["error rate:".len()..].trim().parse().unwrap();
    let want = estimate_rate(&read_records(&file).unwrap(), 5).unwrap();
    assert!((printed - want).abs() < 1e-6);
}

#[test]
fn rate_rejects_short_logs() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("short.csv");
    let mut text = frac_afem::afem::RECORD_COLUMNS.join(",");
    text.push_str("\n0,2,4,1,2,1.2,0.5,0.6,0,0.6,1.2,1.1,0.1,3,0.5\n");
    std::fs::write(&file, text).unwrap();
    let out = bin().arg("rate").arg("--in").arg(&file).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn dump_mesh_prints_a_readable_mesh() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "experiment = \"incompatible_const_2d\"\ns = 0.2\n\n[overrides]\ndof_budget = 50000\n")
        .unwrap();
    let ind = dir.path().join("ind.csv");
    let out = bin()
        .arg("dump-mesh")
        .arg("--config")
        .arg(&cfg)
        .args(["--iter", "2", "--indicators"])
        .arg(&ind)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let (base, ypart) = text.split_at(text.find("YPART").unwrap());
    let mesh = BaseMesh::from_text(base).unwrap();
    let m: usize = ypart.split_whitespace().nth(2).unwrap().parse().unwrap();
    assert_eq!(ypart.lines().count(), m + 2);

    let mut rd = csv::Reader::from_path(&ind).unwrap();
    assert_eq!(rd.headers().unwrap(), vec!["node", "E", "osc", "tau"]);
    assert_eq!(rd.records().count(), mesh.num_vertices());
}

#[test]
fn unknown_experiment_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin().args(["run", "--experiment", "kellogg", "--out"]).arg(dir.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let out = bin().args(["run", "--experiment", "bessel_1d", "--theta", "2", "--out"]).arg(dir.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}
