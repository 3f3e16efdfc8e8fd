use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

use covmode::{Matrix, Method};
use covmode_cli::bench::spatial_data;
use covmode_cli::config::RunConfig;
use covmode_cli::io::{read_table, write_matrix};
use covmode_cli::pipeline::impute;
use covmode_cli::store::{read_ensemble, read_meta};
use tempfile::tempdir;

fn covmode(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_covmode")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = covmode(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn simulate_writes_default_shapes() {
    let dir = tempdir().unwrap();
    ok(&["simulate", "--out", s(dir.path())]);
    let truth = read_table(&dir.path().join("truth.csv")).unwrap();
    assert_eq!(truth.values.shape(), (80, 40));
    let masked = read_table(&dir.path().join("masked.csv")).unwrap();
    assert!(masked.mask.missing_count() > 0);
    let design = read_table(&dir.path().join("design.csv")).unwrap();
    assert_eq!(design.headers, ["intercept", "age"]);
    assert!(dir.path().join("mask.csv").exists());
}

#[test]
fn impute_from_files_matches_in_memory_pipeline() {
    let dir = tempdir().unwrap();
    let (data_dir, ens_dir) = (dir.path().join("data"), dir.path().join("ens"));
    let flags = ["--seed", "5", "--m", "4"];
    let config = dir.path().join("run.cfg");
    std::fs::write(&config, "n = 40\np = 12\nmask_rate = 0.25\n").unwrap();
    let common = |extra: &[&str]| {
        let mut v = vec!["--config", s(&config)];
        v.extend_from_slice(&flags);
        v.extend_from_slice(extra);
        v.iter().map(|a| a.to_string()).collect::<Vec<_>>()
    };
    let sim: Vec<String> = [vec!["simulate".to_string()], common(&["--out", s(&data_dir)])].concat();
    ok(&sim.iter().map(String::as_str).collect::<Vec<_>>());
    let masked = data_dir.join("masked.csv");
    let design = data_dir.join("design.csv");
    let imp: Vec<String> = [
        vec!["impute".to_string()],
        common(&["--method", "himce", "--input", s(&masked), "--design", s(&design), "--out", s(&ens_dir)]),
    ]
    .concat();
    ok(&imp.iter().map(String::as_str).collect::<Vec<_>>());

    let mut cfg = RunConfig::load(&config).unwrap();
    cfg.set("seed", "5").unwrap();
    cfg.set("m", "4").unwrap();
    let data = spatial_data(&cfg.sim, cfg.seed).unwrap();
    let expected = impute(Method::Himce, &data.block, &cfg).unwrap();
    let stored = read_ensemble(&ens_dir).unwrap();
    assert_eq!(stored.mask, *data.block.mask());
    assert_eq!(stored.draws, expected.ensemble.draws);
    assert!(stored.meta.calibration_seconds.is_some());
    assert!(stored.meta.elapsed_seconds > 0.0);
}

fn write_csv(path: &Path, rows: &[&str]) {
    std::fs::write(path, rows.join("\n") + "\n").unwrap();
}

#[test]
fn small_block_takes_exact_branch() {
    let dir = tempdir().unwrap();
    let input = dir.path().join("in.csv");
    let rows: Vec<String> = (0..12)
        .map(|i| {
            let a = (i as f64 * 0.7).sin();
            let b = if i % 4 == 1 { String::new() } else { format!("{}", a * 0.5 + (i as f64).cos()) };
            format!("{a},{b}")
        })
        .collect();
    let mut all = vec!["a,b".to_string()];
    all.extend(rows);
    write_csv(&input, &all.iter().map(String::as_str).collect::<Vec<_>>());
    let out = dir.path().join("ens");
    ok(&["impute", "--method", "himce", "--m", "3", "--input", s(&input), "--out", s(&out)]);
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("meta.json")).unwrap()).unwrap();
    assert_eq!(json["branch"], "exact_refresh");
}

#[test]
fn complete_input_gives_identical_copies() {
    let dir = tempdir().unwrap();
    let input = dir.path().join("in.csv");
    write_csv(&input, &["a,b,c", "1,2,3", "2,1,5", "0,4,1", "3,3,2", "5,0,1", "1,1,4"]);
    let original = read_table(&input).unwrap().values;
    for method in ["mvn_da", "hima", "himce", "mice"] {
        let out = dir.path().join(method);
        ok(&["impute", "--method", method, "--m", "3", "--input", s(&input), "--out", s(&out)]);
        let stored = read_ensemble(&out).unwrap();
        assert_eq!(stored.draws.len(), 3);
        assert!(stored.draws.iter().all(|d| *d == original), "{method}");
    }
}

#[test]
fn self_diagnosis_has_zero_rmse_and_coherent_coverage() {
    let dir = tempdir().unwrap();
    let data = dir.path().join("data");
    let ens = dir.path().join("ens");
    let flags = ["--seed", "3", "--m", "5"];
    ok(&[&["simulate", "--out", s(&data)], &flags[..]].concat());
    ok(&[
        &["impute", "--method", "mice", "--input", s(&data.join("masked.csv")), "--out", s(&ens)],
        &flags[..],
    ]
    .concat());

    let stored = read_ensemble(&ens).unwrap();
    let m = stored.draws.len() as f64;
    let (n, p) = stored.mask.shape();
    let means = Matrix::from_fn(n, p, |i, j| stored.draws.iter().map(|d| d[(i, j)]).sum::<f64>() / m);
    let truth = dir.path().join("means.csv");
    write_matrix(&truth, &stored.meta.headers, &means, None).unwrap();
    let report_dir = dir.path().join("report");
    ok(&["diagnose", "--ensemble", s(&ens), "--truth", s(&truth), "--out", s(&report_dir)]);
    let report: covmode::DiagnosticsReport =
        serde_json::from_str(&std::fs::read_to_string(report_dir.join("report.json")).unwrap()).unwrap();
    assert!(report.rmse < 1e-12, "{}", report.rmse);
    assert!(report.coverage_identity_holds());
    assert!(report_dir.join("pit_export.csv").exists() && report_dir.join("overlay_export.csv").exists());

    // The real truths align too.
    ok(&["diagnose", "--ensemble", s(&ens), "--truth", s(&data.join("truth.csv")), "--out", s(&report_dir)]);
}

#[test]
fn misaligned_truth_is_a_validation_error() {
    let dir = tempdir().unwrap();
    let input = dir.path().join("in.csv");
    write_csv(&input, &["a,b", "1,2", "2,", "0,4", "3,3", "5,0"]);
    let ens = dir.path().join("ens");
    ok(&["impute", "--method", "mice", "--m", "2", "--input", s(&input), "--out", s(&ens)]);
    let truth = dir.path().join("truth.csv");
    write_csv(&truth, &["a,b", "1,2", "2,3"]);
    let out = covmode(&["diagnose", "--ensemble", s(&ens), "--truth", s(&truth), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn exit_codes_follow_failure_class() {
    let dir = tempdir().unwrap();
    assert_eq!(covmode(&["simulate", "--mask-rate", "0", "--out", s(dir.path())]).status.code(), Some(2));
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "no_such_key = 1\n").unwrap();
    assert_eq!(covmode(&["simulate", "--config", s(&cfg), "--out", s(dir.path())]).status.code(), Some(2));
    let missing = dir.path().join("absent.csv");
    assert_eq!(covmode(&["impute", "--input", s(&missing), "--out", s(dir.path())]).status.code(), Some(4));

    // A constant column has no spread for the empirical-Bayes fit.
    let input = dir.path().join("flat.csv");
    write_csv(&input, &["a,b", "1,2", "1,", "1,4", "1,3", "1,0", "1,1"]);
    let out = covmode(&["impute", "--method", "hima", "--m", "2", "--input", s(&input), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn flags_override_config_file() {
    let dir = tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "seed = 3\nm = 7\nn = 30\np = 6\n").unwrap();
    let stdout = ok(&["simulate", "--config", s(&cfg), "--seed", "9", "--out", s(dir.path())]);
    assert!(stdout.contains("seed = 9\n") && stdout.contains("m = 7\n"), "{stdout}");
    assert_eq!(read_table(&dir.path().join("truth.csv")).unwrap().values.shape(), (30, 6));
}

#[test]
fn smoke_benchmark_schema_and_shared_fit() {
    let dir = tempdir().unwrap();
    let start = Instant::now();
    let args = ["bench", "spatial", "--replicates", "2", "--seed", "7", "--out", s(dir.path())];
    let cfg = dir.path().join("smoke.cfg");
    std::fs::write(&cfg, "n = 40\np = 12\n").unwrap();
    ok(&[&args[..], &["--config", s(&cfg)]].concat());
    assert!(start.elapsed().as_secs_f64() < 60.0);

    let mut rdr = csv::Reader::from_path(dir.path().join("summary.csv")).unwrap();
    let headers = rdr.headers().unwrap().clone();
    assert_eq!(headers.len(), 2 + 14);
    let methods: Vec<String> = rdr.records().map(|r| r.unwrap()[0].to_string()).collect();
    assert_eq!(methods, ["hima", "himce", "mice"]);

    let rep = dir.path().join("ensembles_rep001");
    let (hima, himce, mice) = (read_meta(&rep.join("hima")).unwrap(), read_meta(&rep.join("himce")).unwrap(), read_meta(&rep.join("mice")).unwrap());
    assert!(hima.eb_fingerprint.is_some());
    assert_eq!(hima.eb_fingerprint, himce.eb_fingerprint);
    assert_eq!(mice.eb_fingerprint, None);
    assert!(himce.calibration_seconds.is_some() && hima.calibration_seconds.is_none());
    for f in ["replicates.csv", "pit_export.csv", "overlay_export.csv"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}

#[test]
fn lowdim_bench_runs_on_fixture() {
    let dir = tempdir().unwrap();
    ok(&["bench", "lowdim", "--replicates", "3", "--out", s(dir.path())]);
    assert!(dir.path().join("fixture.csv").exists());
    let meta = read_meta(&dir.path().join("ensembles_rep001").join("himce")).unwrap();
    assert_eq!(meta.branch, Some(covmode::Branch::ExactRefresh));
}
