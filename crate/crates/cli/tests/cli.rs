use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[dataset]
kind = "two-moons"
n = 120
noise = 0.1
n_test = 60

[model]
hidden = [8]
feature_dim = 3

[train]
batch_size = 32

[train.sgld]
n_steps = 3

[schedule]
rates = [50.0, 100.0]
initial_epochs = 2
step_epochs = 1
"#;

fn ebpl(dir: &Path, args: &[&str]) -> Output {
    let config = dir.join("tiny.toml");
    if !config.exists() {
        fs::write(&config, TINY).unwrap();
    }
    Command::new(env!("CARGO_BIN_EXE_ebpl"))
        .current_dir(dir)
        .env_remove("EBPL_OUTPUT_ROOT")
        .arg("--config")
        .arg(&config)
        .args(args)
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn manifest(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn help_documents_csv_schemas() {
    let out = Command::new(env!("CARGO_BIN_EXE_ebpl"))
        .arg("--help")
        .output()
        .unwrap();
    let text = ok(&out);
    for header in [
        "epoch,step,n_targeted",
        "index,truth,predicted,confidence,correct",
        "bin,lower,upper",
        "EBPL_OUTPUT_ROOT",
    ] {
        assert!(text.contains(header), "missing {header}");
    }
}

#[test]
fn one_run_directory_per_seed() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&ebpl(
        tmp.path(),
        &["--output", "out", "train", "--seeds", "1,2,3"],
    ));
    for seed in 1..=3u64 {
        let dir = tmp.path().join(format!("out/runs/ebpl-soft/seed-{seed}"));
        let m = manifest(&dir);
        assert_eq!(m["seed"], seed);
        assert_eq!(m["method"], "ebpl-soft");
        // fully resolved config, defaults included
        assert_eq!(m["config"]["train"]["optimizer"]["beta1"], 0.9);
        for a in m["artifacts"].as_array().unwrap() {
            assert!(dir.join(a.as_str().unwrap()).is_file());
        }
    }
}

#[test]
fn baseline_mode_defaults_to_hard_labels() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&ebpl(
        tmp.path(),
        &["-o", "out", "train", "--mode", "baseline"],
    ));
    let m = manifest(&tmp.path().join("out/runs/baseline-hard/seed-1"));
    assert_eq!(m["train_resolved"]["nll_weight"], 0.0);
    assert_eq!(m["curriculum_resolved"]["labels"], "hard");
    assert_eq!(m["curriculum_resolved"]["reinit_each_step"], true);
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("out/runs/ebpl-hard/seed-7");
    ok(&ebpl(
        tmp.path(),
        &["-o", "out", "train", "--labels", "hard", "--seeds", "7"],
    ));
    let first = fs::read(dir.join("epochs.csv")).unwrap();
    ok(&ebpl(
        tmp.path(),
        &["-o", "out", "train", "--labels", "hard", "--seeds", "7"],
    ));
    assert_eq!(first, fs::read(dir.join("epochs.csv")).unwrap());
}

#[test]
fn config_errors_exit_nonzero_with_field() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "[train]\nbatchsize = 3\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_ebpl"))
        .args(["--config", bad.to_str().unwrap(), "train"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("batchsize"));

    let out = ebpl(tmp.path(), &["train", "--batch-size", "0"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("batch_size"));

    let out = ebpl(tmp.path(), &["train", "--labels", "fuzzy"]);
    assert!(!out.status.success());
}

#[test]
fn output_root_from_environment_and_flag() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("tiny.toml"), TINY).unwrap();
    let run = |extra: &[&str]| {
        Command::new(env!("CARGO_BIN_EXE_ebpl"))
            .current_dir(tmp.path())
            .env("EBPL_OUTPUT_ROOT", "from-env")
            .args(["--config", "tiny.toml"])
            .args(extra)
            .output()
            .unwrap()
    };
    ok(&run(&["prepare", "--seeds", "3"]));
    assert!(tmp.path().join("from-env/data/seed-3.json").is_file());
    ok(&run(&["--output", "from-flag", "prepare"]));
    assert!(tmp.path().join("from-flag/data/seed-1.json").is_file());
}

#[test]
fn report_single_run_has_zero_std() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&ebpl(tmp.path(), &["-o", "out", "train"]));
    let stdout = ok(&ebpl(tmp.path(), &["-o", "out", "report"]));
    assert!(stdout.contains("EBPL Soft"));
    let csv = fs::read_to_string(tmp.path().join("out/report/summary.csv")).unwrap();
    let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[0], "ebpl-soft");
    assert_eq!(row[1], "1");
    assert_eq!(row[3], "0.000000");
    let svg = fs::read_to_string(tmp.path().join("out/report/reliability-ebpl-soft.svg")).unwrap();
    assert!(svg.contains(r#"width="640" height="480""#));
    assert!(tmp.path().join("out/report/pl_accuracy.svg").is_file());
}

#[test]
fn incomplete_runs_fail_report_and_evaluate() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&ebpl(tmp.path(), &["-o", "out", "train"]));
    let dir = tmp.path().join("out/runs/ebpl-soft/seed-1");
    ok(&ebpl(tmp.path(), &["evaluate", dir.to_str().unwrap()]));
    fs::remove_file(dir.join("predictions.csv")).unwrap();
    let out = ebpl(tmp.path(), &["-o", "out", "report"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("predictions.csv"));
    assert!(!ebpl(tmp.path(), &["evaluate", dir.to_str().unwrap()])
        .status
        .success());
    assert!(!ebpl(tmp.path(), &["-o", "nowhere", "report"])
        .status
        .success());
}

#[test]
fn evaluate_detects_tampered_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&ebpl(tmp.path(), &["-o", "out", "train"]));
    let dir = tmp.path().join("out/runs/ebpl-soft/seed-1");
    let mut m = manifest(&dir);
    m["metrics"]["accuracy"] = serde_json::json!(0.123);
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string(&m).unwrap(),
    )
    .unwrap();
    let out = ebpl(tmp.path(), &["evaluate", dir.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("MISMATCH"));
}

#[test]
fn ablate_runs_every_method_and_reports() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&ebpl(
        tmp.path(),
        &["-o", "out", "ablate", "--seeds", "1,2"],
    ));
    let csv = fs::read_to_string(tmp.path().join("out/report/summary.csv")).unwrap();
    let methods: Vec<&str> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(
        methods,
        [
            "baseline-wo",
            "baseline-hard",
            "baseline-soft",
            "ebpl-wo",
            "ebpl-hard",
            "ebpl-soft"
        ]
    );
    assert!(csv
        .lines()
        .skip(1)
        .all(|l| l.split(',').nth(1) == Some("2")));
}

#[test]
fn refuses_to_overwrite_foreign_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("out/runs/ebpl-soft/seed-1");
    fs::create_dir_all(&dir).unwrap();
    fs::write(dir.join("notes.txt"), "mine").unwrap();
    let out = ebpl(tmp.path(), &["-o", "out", "train"]);
    assert!(!out.status.success());
    assert_eq!(fs::read_to_string(dir.join("notes.txt")).unwrap(), "mine");
}
