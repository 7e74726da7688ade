//! End-to-end checks of the `bravo-sim` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
seed = 2
rounds = 40
log_every = 10
topology.kind = "complete"
topology.n = 4
byzantine.count = 1
attack.kind = "sign_flip"
problem.kind = "least_squares"
problem.samples_per_agent = 10
algorithm.name = "bravo-saga"
algorithm.alpha = 0.01
algorithm.lambda = 0.005
"#;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bravo-sim"))
        .args(args)
        .env_remove("BRAVO_SIM_THREADS")
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn run_writes_trace_and_refuses_to_overwrite() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", SMALL);
    let out = dir.path().join("out");
    let out_s = out.to_str().unwrap();

    let first = bin(&["run", "--config", &cfg, "--out", out_s]);
    assert!(first.status.success(), "{}", stderr(&first));
    let trace = fs::read_to_string(out.join("trace.csv")).unwrap();
    assert!(trace.starts_with("k,conv_err,model_var,accuracy,grad_noise,lyapunov,wall_ms\n"));
    assert_eq!(trace.lines().count(), 1 + 5);

    let again = bin(&["run", "--config", &cfg, "--out", out_s]);
    assert_eq!(again.status.code(), Some(2));
    assert!(stderr(&again).contains("--force"), "{}", stderr(&again));

    let forced = bin(&["run", "--config", &cfg, "--out", out_s, "--force"]);
    assert!(forced.status.success());
    assert_eq!(fs::read_to_string(out.join("trace.csv")).unwrap(), trace);
}

#[test]
fn header_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", SMALL);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(bin(&["run", "--config", &cfg, "--out", a.to_str().unwrap()]).status.success());
    let header = a.join("header.txt");
    let rerun = bin(&["run", "--config", header.to_str().unwrap(), "--out", b.to_str().unwrap()]);
    assert!(rerun.status.success(), "{}", stderr(&rerun));
    assert_eq!(
        fs::read(a.join("trace.csv")).unwrap(),
        fs::read(b.join("trace.csv")).unwrap()
    );
}

#[test]
fn bad_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", &format!("{SMALL}\nbogus.key = 1\n"));
    let o = bin(&["run", "--config", &cfg, "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn missing_dataset_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let text = SMALL.replace("problem.kind = \"least_squares\"\nproblem.samples_per_agent = 10", "")
        + "problem.kind = \"softmax\"\nproblem.train_images = \"nope-images.gz\"\nproblem.train_labels = \"nope-labels.gz\"\n";
    let cfg = write(dir.path(), "c.toml", &text);
    let o = bin(&["run", "--config", &cfg, "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn divergence_exits_4_with_partial_trace() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", &SMALL.replace("alpha = 0.01", "alpha = 50.0"));
    let out = dir.path().join("o");
    let o = bin(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(fs::read_to_string(out.join("trace.csv")).unwrap().lines().count() >= 2);
}

#[test]
fn sweep_validates_its_arguments() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", SMALL);
    let out = dir.path().join("s");
    let unknown = bin(&["sweep", "--config", &cfg, "--out", out.to_str().unwrap(), "--param", "gamma", "--values", "1"]);
    assert_eq!(unknown.status.code(), Some(2));
    assert!(stderr(&unknown).contains("gamma"));
    let empty = bin(&["sweep", "--config", &cfg, "--out", out.to_str().unwrap(), "--param", "lambda", "--values", ""]);
    assert_ne!(empty.status.code(), Some(0));
}

#[test]
fn sweep_writes_one_directory_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", SMALL);
    let out = dir.path().join("s");
    let o = bin(&[
        "sweep", "--config", &cfg, "--out", out.to_str().unwrap(), "--param", "batch_size", "--values", "1,2,5",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    for v in ["1", "2", "5"] {
        assert!(out.join(format!("batch_size={v}")).join("trace.csv").exists());
    }
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 4);
}

#[test]
fn lambda0_warns_when_penalty_is_small() {
    let dir = tempfile::tempdir().unwrap();
    let text = SMALL.replace("byzantine.count = 1", "byzantine.count = 0").replace("\"sign_flip\"", "\"none\"");
    let cfg = write(dir.path(), "c.toml", &text);
    let o = bin(&["lambda0", "--config", &cfg]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("lambda0 = "));
    assert!(text.contains("warning: lambda = 0.005 is below lambda0"), "{text}");
}

#[test]
fn lowerbound_and_selftest_pass() {
    let lb = bin(&["lowerbound"]);
    assert!(lb.status.success(), "{}", stderr(&lb));
    let st = bin(&["selftest"]);
    assert!(st.status.success(), "{}", stderr(&st));
}
