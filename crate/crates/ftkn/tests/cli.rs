use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
preset = "desk"
seed = 3
[model]
d_model = 16
heads = 2
k = 4
k_out = 4
[fusion]
T = 4
G = 2
[scene]
frames = 6
objects_max = 3
[data]
train_scenes = 2
eval_scenes = 2
[train]
epochs = 1
"#;

fn ftkn(dir: &Path, out: &str, args: &[&str]) -> Output {
    let o = Command::new(env!("CARGO_BIN_EXE_ftkn"))
        .current_dir(dir)
        .args(["--config", "tiny.toml", "--out-dir", out])
        .args(args)
        .output()
        .unwrap();
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    o
}

#[test]
fn repeated_inference_writes_identical_predictions() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    ftkn(dir.path(), "data", &["generate", "--text"]);
    assert!(dir.path().join("data/eval/scene_0001.bin").exists());
    assert!(dir.path().join("data/eval/scene_0001.txt").exists());
    ftkn(dir.path(), "run", &["train", "--scenes", "data/train"]);
    let a = ftkn(dir.path(), "a", &["infer", "--checkpoint", "run/model", "--scenes", "data/eval"]);
    ftkn(dir.path(), "b", &["infer", "--checkpoint", "run/model", "--scenes", "data/eval"]);
    let pa = fs::read(dir.path().join("a/predictions.csv")).unwrap();
    let pb = fs::read(dir.path().join("b/predictions.csv")).unwrap();
    assert!(pa.len() > 100);
    assert_eq!(pa, pb);
    assert_eq!(
        fs::read(dir.path().join("a/telemetry.csv")).unwrap(),
        fs::read(dir.path().join("b/telemetry.csv")).unwrap()
    );
    assert!(String::from_utf8_lossy(&a.stdout).contains("IoU"));
}

#[test]
fn bad_configs_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.toml"), "[model]\nno_such_key = 1\n").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_ftkn"))
        .current_dir(dir.path())
        .args(["--config", "tiny.toml", "generate"])
        .output()
        .unwrap();
    assert!(!o.status.success());
    assert!(!String::from_utf8_lossy(&o.stderr).contains("panicked"));
}
