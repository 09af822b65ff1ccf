use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "
data.train_images = 4
data.test_images = 2
data.width = 64
data.height = 64
data.max_size = 32
data.max_objects = 2
data.proposals = 64
backbone.widths = 4,8,8
local.pool_size = 3
local.fc_dims = 16,16
global.grid = 2
global.steps = 2
global.layers = 2
global.fc_dims = 8,8
train.iterations = 3
train.rois_per_batch = 32
train.lr = 0.01
eval.attend_images = 1
";

fn accnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_accnn"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn tiny(dir: &Path) -> String {
    let path = dir.join("tiny.conf");
    fs::write(&path, TINY).unwrap();
    path.to_string_lossy().into_owned()
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn train_eval_attend_write_their_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let conf = tiny(dir.path());
    let out = dir.path().join("run");
    let out = out.to_str().unwrap();

    let train = accnn(&["train", "--config", &conf, "--out", out, "--seed", "5"]);
    assert!(train.status.success(), "{}", String::from_utf8_lossy(&train.stderr));
    let m = manifest(Path::new(out));
    assert_eq!(m["command"], "train");
    assert_eq!(m["config"]["seed"], 5);
    let artifacts: Vec<&str> = m["artifacts"].as_array().unwrap().iter().map(|a| a.as_str().unwrap()).collect();
    for name in ["checkpoint.bin", "train_log.jsonl"] {
        assert!(artifacts.contains(&name), "{artifacts:?}");
        assert!(Path::new(out).join(name).exists());
    }
    assert_eq!(fs::read_to_string(Path::new(out).join("train_log.jsonl")).unwrap().lines().count(), 3);

    let eval = accnn(&["eval", "--config", &conf, "--out", out]);
    assert!(eval.status.success(), "{}", String::from_utf8_lossy(&eval.stderr));
    assert!(String::from_utf8_lossy(&eval.stdout).contains("mAP"));
    assert_eq!(manifest(Path::new(out))["command"], "eval");
    assert!(Path::new(out).join("report.json").exists());

    let attend = accnn(&["attend", "--config", &conf, "--out", out]);
    assert!(attend.status.success(), "{}", String::from_utf8_lossy(&attend.stderr));
    let csvs = fs::read_dir(Path::new(out).join("attention"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "csv"))
        .count();
    assert_eq!(csvs, 3);
}

#[test]
fn dotted_overrides_reach_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let conf = tiny(dir.path());
    let out = dir.path().join("run");
    let run = accnn(&["train", "--config", &conf, "--out", out.to_str().unwrap(), "--train.iterations=2", "--iters", "1"]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    // named flags win over dotted keys
    assert_eq!(manifest(&out)["config"]["train"]["iterations"], 1);
}

#[test]
fn configuration_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let conf = tiny(dir.path());
    let out = dir.path().to_str().unwrap();
    for args in [
        vec!["train", "--config", &conf, "--out", out, "--train.bogus=1"],
        vec!["train", "--config", &conf, "--out", out, "--variant", "minus_X"],
        vec!["train", "--config", "/nonexistent/run.conf", "--out", out],
        vec!["attend", "--config", &conf, "--out", out, "--variant", "avg_global"],
        vec!["frobnicate"],
    ] {
        let o = accnn(&args);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
}

#[test]
fn missing_checkpoint_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let conf = tiny(dir.path());
    let o = accnn(&["eval", "--config", &conf, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1), "{}", String::from_utf8_lossy(&o.stderr));
}
