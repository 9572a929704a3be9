//! End-to-end tests that drive the compiled binary over real files.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use opsa_core::autodiff::Tensor;
use opsa_core::data::{gen_blobs, split, Dataset, SplitSpec};
use opsa_core::models::{Layer, Mlp, MlpConfig};

fn opsa(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_opsa"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary launches")
}

fn opsa_ok(dir: &Path, args: &[&str]) -> Output {
    let out = opsa(dir, args);
    assert!(
        out.status.success(),
        "command {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn read_json(path: &Path) -> serde_json::Value {
    let text = std::fs::read_to_string(path).expect("report exists");
    serde_json::from_str(&text).expect("report parses")
}

/// Data rows of a CSV file, header dropped.
fn csv_rows(path: &Path) -> Vec<csv::StringRecord> {
    let mut reader = csv::Reader::from_path(path).expect("csv opens");
    reader.records().map(|r| r.expect("row parses")).collect()
}

/// Generate a 4-class, 2-feature blob file through the binary.
fn gen_file(dir: &Path, name: &str, per_class: usize, seed: u64) -> PathBuf {
    opsa_ok(
        dir,
        &[
            "gen-data",
            "--out",
            name,
            "--per-class",
            &per_class.to_string(),
            "--spread",
            "0.04",
            "--seed",
            &seed.to_string(),
        ],
    );
    dir.join(name)
}

/// Train a standard model through the binary.
fn train_file(dir: &Path, data: &str, name: &str, epochs: usize, seed: u64) -> PathBuf {
    let report = format!("{name}.report.json");
    opsa_ok(
        dir,
        &[
            "train",
            "--data",
            data,
            "--out",
            name,
            "--report",
            &report,
            "--mode",
            "standard",
            "--epochs",
            &epochs.to_string(),
            "--lr",
            "0.2",
            "--seed",
            &seed.to_string(),
        ],
    );
    dir.join(name)
}

/// Save a dataset with rows sorted by class so that every file presents
/// the labels in the same first-appearance order.
fn save_sorted(data: &Dataset, path: &Path) {
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.sort_by_key(|&i| data.labels()[i]);
    data.subset(&order).unwrap().save_csv(path).unwrap();
}

#[test]
fn generation_with_one_seed_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let a = gen_file(dir.path(), "a.csv", 30, 7);
    let b = gen_file(dir.path(), "b.csv", 30, 7);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let sidecar = read_json(&dir.path().join("a.csv.meta.json"));
    assert_eq!(sidecar["classes"], 4);
    assert_eq!(sidecar["seed"], 7);
    assert_eq!(csv_rows(&a).len(), 120);
}

#[test]
fn generation_rejects_nonpositive_spread() {
    let dir = tempfile::tempdir().unwrap();
    let out = opsa(dir.path(), &["gen-data", "--out", "x.csv", "--spread", "0"]);
    assert_eq!(exit_code(&out), 2);
    assert!(stderr_of(&out).contains("spread"));
    assert!(!dir.path().join("x.csv").exists());
}

#[test]
fn unknown_config_file_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), "alpha = 0.1\nbogus = 3\n").unwrap();
    let out = opsa(
        dir.path(),
        &["gen-data", "--out", "x.csv", "--config", "run.toml"],
    );
    assert_eq!(exit_code(&out), 2);
    assert!(stderr_of(&out).contains("bogus"));
}

#[test]
fn split_partitions_rows_and_reproduces_bytes() {
    let dir = tempfile::tempdir().unwrap();
    gen_file(dir.path(), "blobs.csv", 50, 14);
    let data_lines = |name: &str| -> Vec<String> {
        std::fs::read_to_string(dir.path().join(name))
            .unwrap()
            .lines()
            .skip(1)
            .map(str::to_string)
            .collect()
    };
    for suffix in ["", "2"] {
        opsa_ok(
            dir.path(),
            &[
                "split",
                "--data",
                "blobs.csv",
                "--out-train",
                &format!("train{suffix}.csv"),
                "--out-cal",
                &format!("cal{suffix}.csv"),
                "--out-test",
                &format!("test{suffix}.csv"),
                "--frac",
                "0.5,0.25,0.25",
                "--seed",
                "15",
            ],
        );
    }

    let mut part_lines = Vec::new();
    for (name, expected) in [("train.csv", 100), ("cal.csv", 50), ("test.csv", 50)] {
        let lines = data_lines(name);
        assert_eq!(lines.len(), expected, "{name} row count");
        let labels: Vec<i64> = lines
            .iter()
            .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
            .collect();
        assert!(
            labels.windows(2).all(|w| w[0] <= w[1]),
            "{name} rows are not label-major"
        );
        part_lines.extend(lines);
    }
    let mut source = data_lines("blobs.csv");
    source.sort();
    part_lines.sort();
    assert_eq!(source, part_lines, "parts are not a partition of the input");

    for name in ["train", "cal", "test"] {
        assert_eq!(
            std::fs::read(dir.path().join(format!("{name}.csv"))).unwrap(),
            std::fs::read(dir.path().join(format!("{name}2.csv"))).unwrap(),
            "{name} part changed between identical runs"
        );
    }
}

#[test]
fn split_rejects_fractions_that_do_not_sum_to_one() {
    let dir = tempfile::tempdir().unwrap();
    gen_file(dir.path(), "blobs.csv", 10, 16);
    let out = opsa(
        dir.path(),
        &[
            "split",
            "--data",
            "blobs.csv",
            "--out-train",
            "a.csv",
            "--out-cal",
            "b.csv",
            "--out-test",
            "c.csv",
            "--frac",
            "0.5,0.5,0.5",
        ],
    );
    assert_eq!(exit_code(&out), 2);
    assert!(stderr_of(&out).contains("sum"));
    assert!(!dir.path().join("a.csv").exists());
}

#[test]
fn training_report_shows_decreasing_loss() {
    let dir = tempfile::tempdir().unwrap();
    gen_file(dir.path(), "train.csv", 40, 1);
    let model = train_file(dir.path(), "train.csv", "model.json", 10, 3);

    let report = read_json(&dir.path().join("model.json.report.json"));
    let epochs = report["epochs"].as_array().unwrap();
    assert_eq!(epochs.len(), 10);
    let first = epochs[0]["mean_loss"].as_f64().unwrap();
    let last = epochs[9]["mean_loss"].as_f64().unwrap();
    assert!(last < first, "loss went {first} -> {last}");
    assert!(Mlp::load(&model).is_ok());
}

#[test]
fn zero_radius_pgd_training_equals_standard_training() {
    let dir = tempfile::tempdir().unwrap();
    gen_file(dir.path(), "train.csv", 30, 2);
    for (mode, name) in [("standard", "std.json"), ("pgd-at", "pgd.json")] {
        opsa_ok(
            dir.path(),
            &[
                "train",
                "--data",
                "train.csv",
                "--out",
                name,
                "--report",
                &format!("{name}.report.json"),
                "--mode",
                mode,
                "--r",
                "0",
                "--epochs",
                "4",
                "--seed",
                "9",
            ],
        );
    }
    assert_eq!(
        std::fs::read(dir.path().join("std.json")).unwrap(),
        std::fs::read(dir.path().join("pgd.json")).unwrap()
    );
    let std_report = read_json(&dir.path().join("std.json.report.json"));
    let pgd_report = read_json(&dir.path().join("pgd.json.report.json"));
    assert_eq!(std_report["epochs"], pgd_report["epochs"]);
}

#[test]
fn conformal_training_requires_start_model_or_pretraining() {
    let dir = tempfile::tempdir().unwrap();
    gen_file(dir.path(), "train.csv", 30, 2);
    let out = opsa(
        dir.path(),
        &[
            "train",
            "--data",
            "train.csv",
            "--out",
            "m.json",
            "--report",
            "r.json",
            "--mode",
            "opsa-at",
            "--pretrain-epochs",
            "0",
        ],
    );
    assert_eq!(exit_code(&out), 2);
    assert!(stderr_of(&out).contains("init-model"));
}

#[test]
fn zero_radius_attack_reproduces_input_bytes() {
    let dir = tempfile::tempdir().unwrap();
    gen_file(dir.path(), "data.csv", 25, 4);
    train_file(dir.path(), "data.csv", "model.json", 2, 5);
    opsa_ok(
        dir.path(),
        &[
            "attack",
            "--model",
            "model.json",
            "--data",
            "data.csv",
            "--out",
            "pert.csv",
            "--r",
            "0",
        ],
    );
    assert_eq!(
        std::fs::read(dir.path().join("data.csv")).unwrap(),
        std::fs::read(dir.path().join("pert.csv")).unwrap()
    );
}

#[test]
fn attack_moves_single_feature_to_ball_boundary() {
    let dir = tempfile::tempdir().unwrap();
    let model = Mlp::from_layers(
        MlpConfig::linear(1, 4),
        vec![Layer {
            weight: Tensor::matrix(&[vec![-1.0], vec![1.0], vec![0.5], vec![-0.2]]).unwrap(),
            bias: Tensor::vector(vec![5.0, 3.0, 2.0, 1.0]).unwrap(),
        }],
    )
    .unwrap();
    model.save(&dir.path().join("model.json")).unwrap();
    std::fs::write(dir.path().join("row.csv"), "x0,label\n2,0\n").unwrap();

    opsa_ok(
        dir.path(),
        &[
            "attack",
            "--model",
            "model.json",
            "--data",
            "row.csv",
            "--out",
            "pert.csv",
            "--log",
            "log.json",
            "--method",
            "opsa",
            "--r",
            "0.5",
            "--no-box",
            "--steps",
            "40",
            "--eta",
            "0.05",
        ],
    );
    let rows = csv_rows(&dir.path().join("pert.csv"));
    assert_eq!(rows.len(), 1);
    let moved: f64 = rows[0][0].parse().unwrap();
    assert!(
        (moved - 2.5).abs() <= 1e-3,
        "perturbed feature {moved}, wanted 2.5"
    );
    let log = read_json(&dir.path().join("log.json"));
    assert_eq!(log["n"], 1);
}

#[test]
fn tiny_calibration_degenerates_to_full_sets() {
    let dir = tempfile::tempdir().unwrap();
    gen_file(dir.path(), "cal.csv", 25, 6);
    gen_file(dir.path(), "test.csv", 25, 7);
    train_file(dir.path(), "cal.csv", "model.json", 2, 8);

    // Keep the header and the first three data rows only.
    let full = std::fs::read_to_string(dir.path().join("cal.csv")).unwrap();
    let tiny: Vec<&str> = full.lines().take(4).collect();
    std::fs::write(dir.path().join("tiny.csv"), tiny.join("\n") + "\n").unwrap();

    opsa_ok(
        dir.path(),
        &[
            "evaluate",
            "--model",
            "model.json",
            "--cal",
            "tiny.csv",
            "--test",
            "test.csv",
            "--out-json",
            "eval.json",
            "--out-csv",
            "eval.csv",
        ],
    );
    let summary = read_json(&dir.path().join("eval.json"));
    assert!(summary["tau"].is_null());
    assert_eq!(summary["tau_is_sentinel"], true);
    assert_eq!(summary["coverage"], 1.0);
    assert_eq!(summary["avg_size"], 4.0);
    assert_eq!(summary["calibration_rank"], 4);
}

#[test]
fn report_aggregates_match_per_sample_rows() {
    let dir = tempfile::tempdir().unwrap();
    gen_file(dir.path(), "cal.csv", 50, 20);
    gen_file(dir.path(), "test.csv", 50, 21);
    train_file(dir.path(), "cal.csv", "model.json", 5, 22);
    opsa_ok(
        dir.path(),
        &[
            "evaluate",
            "--model",
            "model.json",
            "--cal",
            "cal.csv",
            "--test",
            "test.csv",
            "--out-json",
            "eval.json",
            "--out-csv",
            "eval.csv",
            "--alpha",
            "0.1",
        ],
    );
    let summary = read_json(&dir.path().join("eval.json"));
    let rows = csv_rows(&dir.path().join("eval.csv"));
    assert_eq!(rows.len(), summary["n_test"].as_u64().unwrap() as usize);

    let mut covered = 0usize;
    let mut total_size = 0usize;
    for row in &rows {
        let label: usize = row[1].parse().unwrap();
        let size: usize = row[2].parse().unwrap();
        let flag: u8 = row[3].parse().unwrap();
        let members: Vec<usize> = if row[4].is_empty() {
            Vec::new()
        } else {
            row[4].split('|').map(|m| m.parse().unwrap()).collect()
        };
        assert_eq!(members.len(), size);
        assert_eq!(members.contains(&label), flag == 1);
        covered += flag as usize;
        total_size += size;
    }
    let n = rows.len() as f64;
    let coverage = covered as f64 / n;
    let avg_size = total_size as f64 / n;
    assert!((coverage - summary["coverage"].as_f64().unwrap()).abs() < 1e-12);
    assert!((avg_size - summary["avg_size"].as_f64().unwrap()).abs() < 1e-12);

    // Recompute the worst stratified deviation from the per-sample rows.
    let alpha = summary["alpha"].as_f64().unwrap();
    let strata: Vec<(usize, usize)> = summary["strata"]
        .as_array()
        .unwrap()
        .iter()
        .map(|pair| {
            (
                pair[0].as_u64().unwrap() as usize,
                pair[1].as_u64().unwrap() as usize,
            )
        })
        .collect();
    let mut worst = 0.0f64;
    for &(lo, hi) in &strata {
        let mut count = 0usize;
        let mut hits = 0usize;
        for row in &rows {
            let size: usize = row[2].parse().unwrap();
            if lo <= size && size <= hi {
                count += 1;
                hits += row[3].parse::<usize>().unwrap();
            }
        }
        if count > 0 {
            worst = worst.max((hits as f64 / count as f64 - (1.0 - alpha)).abs());
        }
    }
    assert!((worst - summary["sscv"].as_f64().unwrap()).abs() < 1e-12);
}

#[test]
fn coverage_lands_in_band_on_exchangeable_files() {
    let dir = tempfile::tempdir().unwrap();
    let blobs = gen_blobs(4, 2, 625, 0.04, (0.0, 1.0), 11).unwrap();
    let parts = split(&blobs, &SplitSpec::new(0.12, 0.08, 0.80, 12).unwrap()).unwrap();
    assert_eq!(parts.cal.len(), 200);
    assert_eq!(parts.test.len(), 2000);
    save_sorted(&parts.train, &dir.path().join("train.csv"));
    save_sorted(&parts.cal, &dir.path().join("cal.csv"));
    save_sorted(&parts.test, &dir.path().join("test.csv"));

    train_file(dir.path(), "train.csv", "model.json", 10, 13);
    opsa_ok(
        dir.path(),
        &[
            "evaluate",
            "--model",
            "model.json",
            "--cal",
            "cal.csv",
            "--test",
            "test.csv",
            "--out-json",
            "eval.json",
            "--out-csv",
            "eval.csv",
            "--alpha",
            "0.1",
        ],
    );
    let summary = read_json(&dir.path().join("eval.json"));
    let coverage = summary["coverage"].as_f64().unwrap();
    assert!(
        (0.84..=0.96).contains(&coverage),
        "coverage {coverage} outside the finite-sample band"
    );
    assert_eq!(summary["tau_is_sentinel"], false);
}

#[test]
fn sweep_deduplicates_temperatures_with_warning() {
    let dir = tempfile::tempdir().unwrap();
    gen_file(dir.path(), "cal.csv", 15, 30);
    gen_file(dir.path(), "test.csv", 15, 31);
    train_file(dir.path(), "cal.csv", "model.json", 2, 32);
    let out = opsa_ok(
        dir.path(),
        &[
            "sweep-t1",
            "--model",
            "model.json",
            "--cal",
            "cal.csv",
            "--test",
            "test.csv",
            "--t1",
            "1,1,2",
            "--r",
            "0.02",
            "--steps",
            "4",
            "--out-csv",
            "sweep.csv",
            "--out-json",
            "sweep.json",
        ],
    );
    assert!(stderr_of(&out).contains("duplicate"));
    assert_eq!(csv_rows(&dir.path().join("sweep.csv")).len(), 2);
    let summary = read_json(&dir.path().join("sweep.json"));
    assert_eq!(summary["rows"].as_array().unwrap().len(), 2);
    assert_eq!(summary["warnings"].as_array().unwrap().len(), 1);
}

#[test]
fn sweep_requires_a_temperature_list() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("empty.toml"), "t1_values = []\n").unwrap();
    for extra in [vec![], vec!["--config", "empty.toml"]] {
        let mut args = vec![
            "sweep-t1",
            "--model",
            "m.json",
            "--cal",
            "c.csv",
            "--test",
            "t.csv",
            "--out-csv",
            "s.csv",
            "--out-json",
            "s.json",
        ];
        args.extend(extra);
        let out = opsa(dir.path(), &args);
        assert_eq!(exit_code(&out), 2);
        assert!(stderr_of(&out).contains("t1"));
    }
}

#[test]
fn sweep_writes_one_row_per_temperature() {
    let dir = tempfile::tempdir().unwrap();
    let blobs = gen_blobs(4, 2, 60, 0.04, (0.0, 1.0), 40).unwrap();
    let parts = split(&blobs, &SplitSpec::new(0.34, 0.33, 0.33, 41).unwrap()).unwrap();
    save_sorted(&parts.train, &dir.path().join("train.csv"));
    save_sorted(&parts.cal, &dir.path().join("cal.csv"));
    save_sorted(&parts.test, &dir.path().join("test.csv"));
    train_file(dir.path(), "train.csv", "model.json", 6, 42);

    opsa_ok(
        dir.path(),
        &[
            "sweep-t1",
            "--model",
            "model.json",
            "--cal",
            "cal.csv",
            "--test",
            "test.csv",
            "--t1",
            "0.001,1,1000",
            "--r",
            "0.05",
            "--steps",
            "8",
            "--out-csv",
            "sweep.csv",
            "--out-json",
            "sweep.json",
            "--seed",
            "43",
        ],
    );
    let rows = csv_rows(&dir.path().join("sweep.csv"));
    assert_eq!(rows.len(), 3);
    let summary = read_json(&dir.path().join("sweep.json"));
    assert_eq!(summary["rows"].as_array().unwrap().len(), 3);
    let t1s: Vec<f64> = summary["rows"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["t1"].as_f64().unwrap())
        .collect();
    assert_eq!(t1s, vec![0.001, 1.0, 1000.0]);
}
