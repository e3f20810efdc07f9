use std::path::Path;
use std::process::{Command, Output};

use blco::fixtures::EXAMPLE_TNS;

fn blco(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_blco"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn example_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("x.tns"), EXAMPLE_TNS).unwrap();
    let o = blco(
        dir.path(),
        &["convert", "--input", "x.tns", "--output", "x.blco", "--target-bits", "5", "--max-nnz", "6"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    dir
}

#[test]
fn convert_reports_example_layout() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("x.tns"), EXAMPLE_TNS).unwrap();
    let o = blco(
        dir.path(),
        &["convert", "--input", "x.tns", "--output", "x.blco", "--target-bits", "5", "--max-nnz", "6"],
    );
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    for line in ["blocks: 2", "total bits: 6", "stripped bits: 1", "mode bits: 2,2,2"] {
        assert!(text.contains(line), "{text}");
    }
    assert!(text.contains("sort") && text.contains("reencode") && text.contains("batch"));
}

#[test]
fn missing_input_names_path() {
    let dir = tempfile::tempdir().unwrap();
    let o = blco(dir.path(), &["convert", "--input", "absent.tns", "--output", "y.blco"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("absent.tns"));
}

#[test]
fn dims_smaller_than_data() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("x.tns"), EXAMPLE_TNS).unwrap();
    let o = blco(dir.path(), &["convert", "--input", "x.tns", "--output", "y.blco", "--dims", "4,4,3"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn tns_without_data_lines() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("e.tns"), "# nothing\n").unwrap();
    let o = blco(dir.path(), &["convert", "--input", "e.tns", "--output", "e.blco", "--dims", "3,4,5"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn malformed_tns_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.tns"), "1 2 x\n").unwrap();
    let o = blco(dir.path(), &["convert", "--input", "bad.tns", "--output", "y.blco"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn mttkrp_all_modes_verify_and_write() {
    let dir = example_dir();
    let o = blco(
        dir.path(),
        &["mttkrp", "--tensor", "x.blco", "--mode", "all", "--rank", "5", "--verify", "--out", "m.tsv"],
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o).matches("verify PASS").count(), 3);
    for n in 1..=3 {
        let m = std::fs::read_to_string(dir.path().join(format!("m.mode{n}.tsv"))).unwrap();
        assert_eq!(m.lines().count(), 4);
        assert!(m.lines().all(|l| l.split('\t').count() == 5));
    }
}

#[test]
fn streamed_mttkrp_verifies() {
    let dir = example_dir();
    let o = blco(
        dir.path(),
        &["mttkrp", "--tensor", "x.blco", "--rank", "2", "--budget", "600", "--queues", "1", "--verify"],
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.contains("streamed 2 batches"), "{text}");
    assert_eq!(text.matches("verify PASS").count(), 3);
}

#[test]
fn tiny_budget_is_rejected() {
    let dir = example_dir();
    let o = blco(dir.path(), &["mttkrp", "--tensor", "x.blco", "--rank", "2", "--budget", "10"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn auto_strategy_follows_mode_length() {
    let dir = tempfile::tempdir().unwrap();
    let mut tns = String::new();
    for i in 1..=24 {
        tns.push_str(&format!("{i} {} 1.5\n", 200 - i));
    }
    std::fs::write(dir.path().join("u.tns"), tns).unwrap();
    let o = blco(dir.path(), &["convert", "--input", "u.tns", "--output", "u.blco"]);
    assert!(o.status.success());
    let o = blco(
        dir.path(),
        &["mttkrp", "--tensor", "u.blco", "--strategy", "auto", "--compute-units", "108", "--rank", "4"],
    );
    let text = stdout(&o);
    assert!(text.contains("mode 1: strategy hierarchical"), "{text}");
    assert!(text.contains("mode 2: strategy register"), "{text}");
}

#[test]
fn out_of_range_mode() {
    let dir = example_dir();
    let o = blco(dir.path(), &["mttkrp", "--tensor", "x.blco", "--mode", "5"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bad_launch_config_is_usage_error() {
    let dir = example_dir();
    let o = blco(dir.path(), &["mttkrp", "--tensor", "x.blco", "--wg", "12", "--tile", "8"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn truncated_container() {
    let dir = example_dir();
    let bytes = std::fs::read(dir.path().join("x.blco")).unwrap();
    std::fs::write(dir.path().join("t.blco"), &bytes[..bytes.len() - 5]).unwrap();
    let o = blco(dir.path(), &["mttkrp", "--tensor", "t.blco"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn verify_example_full_grid() {
    let dir = example_dir();
    let o = blco(dir.path(), &["verify", "--tensor", "x.tns", "--grid", "full"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert_eq!(text.matches("54 configs PASS").count(), 6, "{text}");
    assert!(!text.contains("FAIL"));
}

#[test]
fn bench_emits_json_lines() {
    let dir = example_dir();
    let o = blco(dir.path(), &["bench", "--tensor", "x.blco", "--iters", "2", "--rank", "4"]);
    assert_eq!(o.status.code(), Some(0));
    let lines: Vec<serde_json::Value> = stdout(&o)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 3);
    for (n, v) in lines.iter().enumerate() {
        assert_eq!(v["mode"], n + 1);
        assert_eq!(v["iters"], 2);
        assert!(v["min_s"].as_f64().unwrap() <= v["mean_s"].as_f64().unwrap());
    }
}

#[test]
fn bench_empty_tensor() {
    let dir = tempfile::tempdir().unwrap();
    let empty = blco::SparseTensorCoo::empty(vec![3, 4, 5]).unwrap();
    let tensor = blco::build_blco(&empty, 64, 1 << 27).unwrap();
    let file = std::fs::File::create(dir.path().join("e.blco")).unwrap();
    blco::format::serialize_blco(&tensor, file).unwrap();
    let o = blco(dir.path(), &["bench", "--tensor", "e.blco"]);
    assert_eq!(o.status.code(), Some(0));
    let lines: Vec<serde_json::Value> = stdout(&o)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 3);
    assert!(lines.iter().all(|v| v["nnz"] == 0 && v["gbps"] == 0.0));
}

#[test]
fn cpals_exports_model() {
    let dir = tempfile::tempdir().unwrap();
    // rank-4 outer-product tensor, 8 x 9 x 10, exact integers
    let mut tns = String::new();
    for i in 0..8u64 {
        for j in 0..9u64 {
            for k in 0..10u64 {
                let v: u64 = (0..4).map(|r| (i + r + 1) * ((j * (r + 1)) % 5 + 1) * ((k + 2 * r) % 7 + 1)).sum();
                tns.push_str(&format!("{} {} {} {v}\n", i + 1, j + 1, k + 1));
            }
        }
    }
    std::fs::write(dir.path().join("r.tns"), tns).unwrap();
    assert!(blco(dir.path(), &["convert", "--input", "r.tns", "--output", "r.blco"]).status.success());
    let o = blco(
        dir.path(),
        &["cpals", "--tensor", "r.blco", "--rank", "4", "--iters", "200", "--tol", "1e-9", "--seed", "3", "--out-dir", "cp"],
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("cp/manifest.json")).unwrap()).unwrap();
    assert!(manifest["final_fit"].as_f64().unwrap() >= 0.99, "{manifest}");
    assert_eq!(manifest["rank"], 4);
    for n in 1..=3 {
        assert!(dir.path().join(format!("cp/factor_mode{n}.tsv")).exists());
    }
    assert_eq!(std::fs::read_to_string(dir.path().join("cp/lambda.tsv")).unwrap().lines().count(), 4);
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(blco(dir.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(blco(dir.path(), &["mttkrp"]).status.code(), Some(2));
    assert_eq!(blco(dir.path(), &["--help"]).status.code(), Some(0));
}
