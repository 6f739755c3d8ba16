use std::path::Path;
use std::process::{Command, Output};

fn vae2(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vae2")).args(args).output().expect("spawn vae2")
}

fn ok(args: &[&str]) -> String {
    let out = vae2(args);
    assert!(
        out.status.success(),
        "{args:?}: {}{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_data_writes_split_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    let line = ok(&["gen-data", "--k", "10", "--seed", "1", "--out", s(&data)]);
    assert!(line.contains("train=9 test=1"), "{line}");
    let train = std::fs::read_to_string(data.join("train.csv")).unwrap();
    assert_eq!(train.lines().count(), 10);
    assert!(train.starts_with("alpha,v0,v1,"));
    assert!(data.join("manifest.json").exists());
}

#[test]
fn train_sample_eval_report_round() {
    let dir = tempfile::tempdir().unwrap();
    let d = |n: &str| dir.path().join(n);
    ok(&["gen-data", "--k", "60", "--seed", "2", "--out", s(&d("data"))]);
    for model in ["vae2", "beta-vae"] {
        let line = ok(&[
            "train", "--model", model, "--data", s(&d("data")), "--epochs", "2", "--batch", "16", "--out", s(&d(model)),
        ]);
        assert!(line.starts_with(&format!("train model={model} ")), "{line}");
        let history = std::fs::read_to_string(d(model).join("history.csv")).unwrap();
        assert_eq!(history.lines().count(), 3);
    }

    let test_row = std::fs::read_to_string(d("data").join("test.csv")).unwrap();
    let row = test_row.lines().nth(1).unwrap().split_once(',').unwrap().1.to_string();
    let draws = ok(&["sample", "--ckpt", s(&d("vae2").join("checkpoint.json")), "--input-row", &row, "--n", "3"]);
    assert_eq!(draws.lines().count(), 3);
    assert!(draws.lines().all(|l| l.split(',').count() == 10));
    let first_ten: Vec<&str> = row.split(',').take(10).collect();
    let again = ok(&["sample", "--ckpt", s(&d("vae2")), "--input-row", &first_ten.join(","), "--n", "3"]);
    assert_eq!(draws, again);

    ok(&[
        "eval", "--ckpt", s(&d("vae2")), s(&d("beta-vae")), "--data", s(&d("data")), "--n-samples", "5",
        "--best-of", "1,5", "--out", s(&d("eval")),
    ]);
    let metrics = std::fs::read_to_string(d("eval").join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    assert!(d("eval").join("kl.svg").exists());

    ok(&["report", "--in", s(&d("eval")), "--out", s(&d("again"))]);
    for f in ["metrics.csv", "best_of_n.csv", "kl_history.csv", "kl.svg"] {
        assert_eq!(
            std::fs::read(d("eval").join(f)).unwrap(),
            std::fs::read(d("again").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn failures_exit_nonzero_with_a_fail_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = vae2(&["train", "--model", "gan", "--data", s(dir.path()), "--out", s(&dir.path().join("x"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("FAIL train: "));

    let out = vae2(&["sample", "--ckpt", s(&dir.path().join("missing.json")), "--input-row", "0.5"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("FAIL sample: "));
}

#[test]
fn verify_bounds_and_grad_check() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("bounds.csv");
    let line = ok(&["verify-bounds", "--instances", "40", "--max-size", "4", "--seed", "5", "--out", s(&csv)]);
    assert!(line.contains("failures=0"), "{line}");
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 41);
    assert!(text.lines().skip(1).all(|l| l.ends_with(",pass")));

    let line = ok(&["grad-check", "--model", "kl", "--seed", "3"]);
    assert!(line.starts_with("grad-check model=kl params=128 "), "{line}");
    let out = vae2(&["verify-bounds", "--max-size", "9", "--out", s(&csv)]);
    assert!(!out.status.success());
}
