use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn spectree(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spectree"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn spectree")
}

fn ok(args: &[&str], dir: &Path) -> String {
    let out = spectree(args, dir);
    assert!(
        out.status.success(),
        "spectree {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn without_timing(report: &str) -> String {
    report
        .lines()
        .filter(|l| !l.starts_with("examples_per_second"))
        .collect::<Vec<_>>()
        .join("\n")
}

fn value(report: &str, key: &str) -> f64 {
    report
        .lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("no {key} in\n{report}"))
        .parse()
        .unwrap()
}

fn pipeline(dir: &Path, threads: &str) -> (String, Vec<u8>, Vec<u8>) {
    ok(
        &["synth", "--classes", "24", "--dim", "8", "--per-class", "40", "--noise", "0.05", "--seed", "3",
          "--train-out", "train.svm", "--test-out", "test.svm"],
        dir,
    );
    ok(
        &["--threads", threads, "build-tree", "--train", "train.svm", "--out", "tree.bin", "--depth", "3",
          "--leaf-budget", "6", "--seed", "1"],
        dir,
    );
    ok(
        &["--threads", threads, "train", "--train", "train.svm", "--tree", "tree.bin", "--out", "model.bin",
          "--epochs", "3", "--lr", "0.5", "--seed", "2"],
        dir,
    );
    let report = ok(
        &["--threads", threads, "evaluate", "--test", "test.svm", "--tree", "tree.bin", "--model", "model.bin"],
        dir,
    );
    (
        without_timing(&report),
        fs::read(dir.join("tree.bin")).unwrap(),
        fs::read(dir.join("model.bin")).unwrap(),
    )
}

#[test]
fn pipeline_is_reproducible_across_runs_and_thread_counts() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let first = pipeline(a.path(), "1");
    let second = pipeline(b.path(), "2");
    assert_eq!(first.0, second.0);
    assert!(first.1 == second.1, "tree bytes differ");
    assert!(first.2 == second.2, "model bytes differ");
    assert!(value(&first.0, "accuracy") > 0.9, "{}", first.0);
}

#[test]
fn depth_zero_tree_recall_is_global_top_k() {
    let dir = tempfile::tempdir().unwrap();
    // class frequencies 5, 4, 3, 2, 1 in training
    let mut train = String::from("#d 2\n#c 5\n");
    for (class, count) in [(0, 5), (1, 4), (2, 3), (3, 2), (4, 1)] {
        for i in 0..count {
            train.push_str(&format!("{class} 1:{}.0 2:{}.5\n", class + 1, i));
        }
    }
    // one test example per class; the top two classes cover 2 of 5
    let test = "#d 2\n#c 5\n0 1:1.0\n1 1:2.0\n2 1:3.0\n3 1:4.0\n4 1:5.0\n";
    fs::write(dir.path().join("train.svm"), train).unwrap();
    fs::write(dir.path().join("test.svm"), test).unwrap();
    let build = ok(
        &["build-tree", "--train", "train.svm", "--out", "tree.bin", "--depth", "0", "--leaf-budget", "2"],
        dir.path(),
    );
    assert_eq!(value(&build, "leaves"), 1.0);
    ok(&["train", "--train", "train.svm", "--tree", "tree.bin", "--out", "model.bin"], dir.path());
    let eval = ok(
        &["evaluate", "--test", "test.svm", "--tree", "tree.bin", "--model", "model.bin"],
        dir.path(),
    );
    assert!((value(&eval, "tree_recall_test") - 0.4).abs() < 1e-12, "{eval}");
    assert!(value(&eval, "accuracy") <= 0.4 + 1e-12);
}

#[test]
fn train_requires_a_tree() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("train.svm"), "0 1:1.0\n1 1:-1.0\n").unwrap();
    let out = spectree(&["train", "--train", "train.svm", "--out", "model.bin"], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--tree"));
    let out = spectree(
        &["train", "--train", "train.svm", "--tree", "missing.bin", "--out", "model.bin"],
        dir.path(),
    );
    assert!(!out.status.success());
    assert!(!dir.path().join("model.bin").exists());
}

#[test]
fn artifacts_with_another_version_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    pipeline(dir.path(), "1");
    for (file, flag) in [("tree.bin", "--tree"), ("model.bin", "--model")] {
        let mut bytes = fs::read(dir.path().join(file)).unwrap();
        bytes[4] = bytes[4].wrapping_add(1);
        let bumped = format!("bumped-{file}");
        fs::write(dir.path().join(&bumped), bytes).unwrap();
        let (tree, model) = if flag == "--tree" {
            (bumped.as_str(), "model.bin")
        } else {
            ("tree.bin", bumped.as_str())
        };
        let out = spectree(
            &["evaluate", "--test", "test.svm", "--tree", tree, "--model", model],
            dir.path(),
        );
        assert!(!out.status.success());
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(err.contains("version"), "{err}");
    }
}

#[test]
fn model_from_another_tree_is_rejected() {
    let a = tempfile::tempdir().unwrap();
    pipeline(a.path(), "1");
    ok(
        &["build-tree", "--train", "train.svm", "--out", "other.bin", "--depth", "2", "--leaf-budget", "6"],
        a.path(),
    );
    let out = spectree(
        &["evaluate", "--test", "test.svm", "--tree", "other.bin", "--model", "model.bin"],
        a.path(),
    );
    assert!(!out.status.success());
}
