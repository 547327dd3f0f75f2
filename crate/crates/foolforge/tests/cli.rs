//! End-to-end checks of the command-line tool: artifact determinism, the
//! freshness guard, environment overrides, the serving loop, and the exit
//! code contract (2 for usage errors, 1 for runtime errors).

use std::path::Path;
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

use foolforge::oracle::OracleClient;
use foolforge::tensor::Tensor;

/// A command with the inherited FOOLFORGE_* environment stripped, so test
/// runs cannot be steered by the caller's shell.
fn foolforge() -> Command {
    let mut command = Command::new(env!("CARGO_BIN_EXE_foolforge"));
    for (key, _) in std::env::vars() {
        if key.starts_with("FOOLFORGE_") {
            command.env_remove(key);
        }
    }
    command
}

fn run(args: &[&str]) -> Output {
    foolforge().args(args).output().expect("spawn foolforge")
}

fn stdout(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).into_owned()
}

fn stderr(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).into_owned()
}

fn make_dataset(dir: &Path) -> std::path::PathBuf {
    let out = run(&["dataset", "--synthetic", "--out", dir.to_str().unwrap()]);
    assert!(out.status.success(), "dataset failed: {}", stderr(&out));
    dir.join("dataset.ffdat")
}

fn train_quick_victim(dir: &Path, data: &Path) -> std::path::PathBuf {
    let out = run(&[
        "train-victim",
        "--data",
        data.to_str().unwrap(),
        "--arch",
        "bedrock",
        "--epochs",
        "2",
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "train-victim failed: {}", stderr(&out));
    dir.join("bedrock.ffcls")
}

#[test]
fn dataset_is_deterministic_and_guarded() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let first = make_dataset(a.path());
    let second = make_dataset(b.path());
    assert_eq!(
        std::fs::read(&first).unwrap(),
        std::fs::read(&second).unwrap(),
        "same seed and profile must produce identical archives"
    );
    assert!(a.path().join("manifest-dataset.toml").exists());

    let clash = run(&["dataset", "--synthetic", "--out", a.path().to_str().unwrap()]);
    assert_eq!(clash.status.code(), Some(1));
    let message = stderr(&clash);
    assert!(
        message.contains("--force") && message.contains("dataset.ffdat"),
        "freshness guard should name the file and the override: {message}"
    );

    let forced = run(&[
        "dataset",
        "--synthetic",
        "--force",
        "--out",
        a.path().to_str().unwrap(),
    ]);
    assert!(forced.status.success(), "{}", stderr(&forced));
}

#[test]
fn environment_overrides_the_profile() {
    let dir = tempfile::tempdir().unwrap();
    let out = foolforge()
        .args(["dataset", "--synthetic", "--out", dir.path().to_str().unwrap()])
        .env("FOOLFORGE_DATASET_PER_CLASS_TRAIN", "2")
        .env("FOOLFORGE_DATASET_PER_CLASS_VAL", "1")
        .output()
        .expect("spawn foolforge");
    assert!(out.status.success(), "{}", stderr(&out));
    let line = stdout(&out);
    assert!(
        line.contains("20 train / 10 val"),
        "per-class env overrides should shape the corpus: {line}"
    );
}

#[test]
fn serve_oracle_answers_then_exits() {
    let dir = tempfile::tempdir().unwrap();
    let data = make_dataset(dir.path());
    let victim = train_quick_victim(dir.path(), &data);
    let ready = dir.path().join("addr.txt");

    let child = foolforge()
        .args([
            "serve-oracle",
            "--victim",
            victim.to_str().unwrap(),
            "--addr",
            "127.0.0.1:0",
            "--ready-file",
            ready.to_str().unwrap(),
            "--max-requests",
            "2",
        ])
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .expect("spawn serve-oracle");

    let deadline = Instant::now() + Duration::from_secs(30);
    let addr = loop {
        if let Ok(text) = std::fs::read_to_string(&ready) {
            if !text.trim().is_empty() {
                break text.trim().to_string();
            }
        }
        assert!(Instant::now() < deadline, "server never wrote the ready file");
        std::thread::sleep(Duration::from_millis(50));
    };

    let client = OracleClient::new(&addr).unwrap();
    let image = Tensor::full(&[3, 32, 32], 0.5);
    for _ in 0..2 {
        let answers = client.query(&image, 1).expect("query served oracle");
        assert_eq!(answers.len(), 1);
    }

    let out = child.wait_with_output().expect("server exit");
    assert!(
        out.status.success(),
        "server should exit cleanly after the request budget: {}",
        stderr(&out)
    );
    assert!(stdout(&out).contains("oracle listening on "));
}

#[test]
fn fooling_feeds_report_plots() {
    let dir = tempfile::tempdir().unwrap();
    let data = make_dataset(dir.path());
    let victim = train_quick_victim(dir.path(), &data);
    let fooling_dir = dir.path().join("fooling");

    let gen = run(&[
        "gen-fooling",
        "--victim",
        victim.to_str().unwrap(),
        "--methods",
        "naive",
        "--count",
        "1",
        "--steps",
        "4",
        "--out",
        fooling_dir.to_str().unwrap(),
    ]);
    assert!(gen.status.success(), "gen-fooling failed: {}", stderr(&gen));

    let report_dir = dir.path().join("report");
    let rep = run(&[
        "report",
        "--fooling-dir",
        fooling_dir.to_str().unwrap(),
        "--out",
        report_dir.to_str().unwrap(),
    ]);
    assert!(rep.status.success(), "report failed: {}", stderr(&rep));
    let spectrum = std::fs::read_to_string(report_dir.join("plot-spectrum.csv")).unwrap();
    assert!(spectrum.starts_with("image,high_freq_energy"));
    assert!(spectrum.lines().count() >= 2, "spectrum plot has no rows: {spectrum}");
}

#[test]
fn usage_errors_exit_two_runtime_errors_exit_one() {
    let usage = run(&["definitely-not-a-command"]);
    assert_eq!(usage.status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let runtime = run(&[
        "evaluate",
        "--attack",
        dir.path().join("missing.ffatk").to_str().unwrap(),
        "--victims-dir",
        dir.path().to_str().unwrap(),
        "--out",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(runtime.status.code(), Some(1));
    let message = stderr(&runtime);
    assert!(
        message.starts_with("error: ") && message.trim().lines().count() == 1,
        "runtime errors must be a single parseable line: {message:?}"
    );
}
