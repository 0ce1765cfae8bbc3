use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = "\
# small enough to train in about a second
gen_n_patients = 800
gen_prevalence = 0.2
vocab_size = 20
max_slots = 12
n_filters = 2
lstm_hidden = 4
dense_sizes = 4
max_epochs = 2
batch_size = 64
bootstrap = 10
";

fn tgcnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tgcnn"))
        .args(args)
        .env_remove("RUN_SEED")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = tgcnn(args);
    assert!(
        out.status.success(),
        "tgcnn {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn run_dir(stdout: &str) -> PathBuf {
    PathBuf::from(
        stdout
            .lines()
            .find_map(|l| l.strip_prefix("run directory: "))
            .expect("run directory line"),
    )
}

fn tiny_config(dir: &Path) -> String {
    let path = dir.join("tiny.txt");
    fs::write(&path, TINY).unwrap();
    path.to_str().unwrap().to_string()
}

fn config_value(dir: &Path, key: &str) -> String {
    let text = fs::read_to_string(dir.join("config.txt")).unwrap();
    text.lines()
        .find_map(|l| l.split_once(" = ").filter(|(k, _)| *k == key).map(|(_, v)| v.to_string()))
        .unwrap()
}

#[test]
fn generate_prepare_train_on_csv_input() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let data = tmp.path().join("data");
    let stdout = ok(&["generate", "--out", data.to_str().unwrap(), "--n", "600", "--seed", "4"]);
    assert!(stdout.contains("wrote 600 patients"));
    for f in ["events.csv", "demographics.csv", "outcomes.csv"] {
        assert!(data.join(f).exists(), "{f}");
    }

    let root = tmp.path().join("runs");
    let common = ["--config", &cfg, "--data", data.to_str().unwrap(), "--out", root.to_str().unwrap()];
    let prep = ok(&[&["prepare"], &common[..]].concat());
    assert!(prep.contains("matched_pairs = "));
    let dir = run_dir(&prep);
    assert!(dir.join("split.csv").exists() && dir.join("vocab.txt").exists());

    let train = ok(&[&["train"], &common[..]].concat());
    assert_eq!(run_dir(&train), dir);
    assert!(dir.join("model.ckpt").exists());
    let history = fs::read_to_string(dir.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 1 + 3, "header, initial epoch and two epochs");

    let eval = ok(&[&["evaluate"], &common[..], &["--partition", "test1"]].concat());
    assert!(eval.contains("auroc"));
    assert!(dir.join("predictions_test1.csv").exists());
}

#[test]
fn usage_and_data_errors_have_distinct_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    assert_eq!(tgcnn(&["train", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(tgcnn(&["frobnicate"]).status.code(), Some(1));
    let missing = tmp.path().join("missing.txt");
    assert_eq!(
        tgcnn(&["prepare", "--out", out, "--config", missing.to_str().unwrap()]).status.code(),
        Some(2)
    );
    let bad = tmp.path().join("bad.txt");
    fs::write(&bad, "colour = red\n").unwrap();
    let res = tgcnn(&["prepare", "--out", out, "--config", bad.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&res.stderr).contains("colour"));
}

#[test]
fn flags_override_file_and_set_override_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let root = tmp.path().join("runs");
    let stdout = ok(&[
        "prepare",
        "--config",
        &cfg,
        "--out",
        root.to_str().unwrap(),
        "--set",
        "vocab_size=15",
        "--set",
        "seed=5",
        "--seed",
        "9",
    ]);
    let dir = run_dir(&stdout);
    assert!(dir.to_string_lossy().ends_with("-seed9"));
    assert_eq!(config_value(&dir, "seed"), "9");
    assert_eq!(config_value(&dir, "vocab_size"), "15");
    assert_eq!(config_value(&dir, "gen_n_patients"), "800");
    let vocab = fs::read_to_string(dir.join("vocab.txt")).unwrap();
    assert_eq!(vocab.lines().filter(|l| !l.starts_with('#')).count(), 15);
}

#[test]
fn recorded_config_reproduces_the_run_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let root = tmp.path().join("runs");
    let root_s = root.to_str().unwrap();
    let first = run_dir(&ok(&["train", "--config", &cfg, "--out", root_s, "--seed", "2"]));

    let recorded = first.join("config.txt");
    let other = tmp.path().join("other");
    let second = run_dir(&ok(&[
        "train",
        "--config",
        recorded.to_str().unwrap(),
        "--out",
        other.to_str().unwrap(),
    ]));
    assert_eq!(first.file_name(), second.file_name());
    for f in ["config.txt", "split.csv", "vocab.txt", "model.ckpt", "history.csv"] {
        assert_eq!(fs::read(first.join(f)).unwrap(), fs::read(second.join(f)).unwrap(), "{f}");
    }

    let via_run = ok(&["evaluate", "--run", first.to_str().unwrap()]);
    assert!(via_run.contains("auroc"));
}

#[test]
fn cohort_table_rows_sum_to_total() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let dir = run_dir(&ok(&["prepare", "--config", &cfg, "--out", tmp.path().join("r").to_str().unwrap()]));
    let table = fs::read_to_string(dir.join("cohort.csv")).unwrap();
    let rows: Vec<Vec<String>> = table.lines().skip(1).map(|l| l.split(',').map(String::from).collect()).collect();
    assert_eq!(
        rows.iter().map(|r| r[0].as_str()).collect::<Vec<_>>(),
        ["train", "test1", "test2", "total"]
    );
    let count_cols = [1, 2, 3, 4, 5, 8, 9, 10, 11, 12];
    for c in count_cols {
        let parts: usize = rows[..3].iter().map(|r| r[c].parse::<usize>().unwrap()).sum();
        assert_eq!(parts, rows[3][c].parse::<usize>().unwrap(), "column {c}");
    }
    for r in &rows {
        let n: usize = r[1].parse().unwrap();
        let parse = |i: usize| r[i].parse::<usize>().unwrap();
        assert_eq!(parse(2) + parse(3), n);
        assert_eq!(parse(4) + parse(5), n);
        assert_eq!((8..13).map(parse).sum::<usize>(), n);
    }
}

#[test]
fn report_is_regenerated_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let root = tmp.path().join("runs");
    let dir = run_dir(&ok(&["recalibrate", "--config", &cfg, "--out", root.to_str().unwrap()]));
    let recal = fs::read_to_string(dir.join("recalibration.txt")).unwrap();
    for key in ["a = ", "b = ", "test1_slope = ", "test1_slope_z = "] {
        assert!(recal.contains(key), "{key}");
    }
    ok(&["report", "--run", dir.to_str().unwrap()]);
    let first = fs::read(dir.join("report.md")).unwrap();
    ok(&["report", "--run", dir.to_str().unwrap()]);
    assert_eq!(first, fs::read(dir.join("report.md")).unwrap());
    let text = String::from_utf8(first).unwrap();
    assert!(text.contains("## Recalibration"));
    assert!(text.contains("## Cohort characteristics"));
    assert!(!text.contains("## Ablations"));
}
