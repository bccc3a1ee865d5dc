use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn mcf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mcf")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = mcf(args);
    assert!(out.status.success(), "mcf {args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/tiny.toml")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn generate_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["generate", "--config", s(&fixture()), "--out", s(&a)]);
    ok(&["generate", "--config", s(&fixture()), "--out", s(&b)]);
    for f in ["dataset.bin", "train.csv", "val.csv", "meta.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let c = dir.path().join("c");
    ok(&["generate", "--config", s(&fixture()), "--seed", "99", "--out", s(&c)]);
    assert_ne!(fs::read(a.join("dataset.bin")).unwrap(), fs::read(c.join("dataset.bin")).unwrap());
}

#[test]
fn train_sample_eval_plot() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let ck = dir.path().join("ck");
    ok(&["generate", "--config", s(&fixture()), "--out", s(&data)]);
    ok(&["train", "--config", s(&fixture()), "--data", s(&data), "--out", s(&ck)]);
    for f in ["config.toml", "params.bin", "optimizer.bin", "rng.bin", "metrics.csv"] {
        assert!(ck.join(f).is_file(), "{f}");
    }

    let samples = dir.path().join("s.csv");
    ok(&["sample", "--checkpoint", s(&ck), "--n", "25", "--seed", "1", "--out", s(&samples)]);
    let text = fs::read_to_string(&samples).unwrap();
    assert_eq!(text.lines().next(), Some("x0,x1,x2"));
    assert_eq!(text.lines().count(), 26);

    let empty = dir.path().join("empty.csv");
    ok(&["sample", "--checkpoint", s(&ck), "--n", "0", "--out", s(&empty)]);
    assert_eq!(fs::read_to_string(&empty).unwrap().lines().count(), 1);

    let report = dir.path().join("report.json");
    ok(&["eval", "--checkpoint", s(&ck), "--data", s(&data), "--mode", "exact,bound", "--out", s(&report)]);
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    for mode in ["exact", "bound"] {
        assert!(r["mean_nll"][mode].as_f64().unwrap().is_finite(), "{mode}");
    }
    assert!(r["mean_recon_error"].as_f64().unwrap() >= 0.0);

    let png = dir.path().join("map.png");
    ok(&["plot", "--checkpoint", s(&ck), "--projection", "mollweide", "--size", "40", "--out", s(&png)]);
    let img = image::open(&png).unwrap();
    assert_eq!((img.width(), img.height()), (80, 40));
    let scatter = dir.path().join("scatter.png");
    ok(&["plot", "--data", s(&samples), "--projection", "scatter3d", "--size", "50", "--out", s(&scatter)]);
    assert!(image::open(&scatter).is_ok());
}

#[test]
fn zero_epoch_training_and_foreign_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(fixture()).unwrap();
    let cfg = dir.path().join("zero.toml");
    fs::write(&cfg, text.replace("recon_epochs = 3", "recon_epochs = 0").replace("ml_epochs = 3", "ml_epochs = 0")).unwrap();
    let ck = dir.path().join("ck");
    ok(&["train", "--config", s(&cfg), "--out", s(&ck)]);
    assert_eq!(fs::read_to_string(ck.join("metrics.csv")).unwrap().lines().count(), 1);

    // A checkpoint whose config no longer matches its parameters is refused.
    let changed = fs::read_to_string(ck.join("config.toml")).unwrap().replace("hidden_units = 8", "hidden_units = 9");
    fs::write(ck.join("config.toml"), changed).unwrap();
    let out = mcf(&["sample", "--checkpoint", s(&ck), "--n", "3", "--out", s(&dir.path().join("x.csv"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("hash"), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn bad_input_fails_cleanly() {
    let out = mcf(&["generate", "--config", "no_such_preset", "--out", "/nonexistent/x"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
    let out = mcf(&["plot", "--projection", "mercator", "--out", "x.png"]);
    assert!(!out.status.success());
}
