use std::path::Path;
use std::process::{Command, Output};

use mvalign::trainer::{checkpoint_load, DatasetSpec, TrainConfig};
use mvalign::views::{synth_generate, SynthSpec};

fn mvalign(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mvalign"))
        .args(args)
        .output()
        .unwrap()
}

fn text(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn small_config(dir: &Path) -> String {
    let cfg = TrainConfig {
        slices: 6,
        critic_hidden: vec![6],
        critic_steps: 1,
        batch_size: 16,
        negatives: 8,
        epochs: 1,
        dataset: DatasetSpec {
            n: 48,
            synth: SynthSpec {
                latent_dim: 4,
                view_dims: vec![6, 5, 4],
                ..SynthSpec::default()
            },
            ..DatasetSpec::default()
        },
        c1: 8,
        c2: 4,
        h: 2,
        w: 2,
        extract_hidden: 16,
        map_hidden: 12,
        ..TrainConfig::default()
    };
    let path = dir.join("small.json");
    std::fs::write(&path, cfg.to_json()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn gen_train_eval() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let s = |p: &str| d.join(p).to_str().unwrap().to_string();

    let o = mvalign(&["gen-data", "--n", "40", "--out", &s("data")]);
    assert!(o.status.success(), "{o:?}");
    assert!(d.join("data/data.mvds").exists() && d.join("data/config.json").exists());

    let cfg = small_config(d);
    let o = mvalign(&[
        "train",
        "--config",
        &cfg,
        "--out",
        &s("run"),
        "--epochs",
        "2",
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    for f in [
        "config.json",
        "metrics.csv",
        "epoch_0.ckpt",
        "epoch_1.ckpt",
        "epoch_2.ckpt",
    ] {
        assert!(d.join("run").join(f).exists(), "{f}");
    }
    let written =
        TrainConfig::from_json(&std::fs::read_to_string(d.join("run/config.json")).unwrap())
            .unwrap();
    assert_eq!(written.epochs, 2);

    let o = mvalign(&[
        "train",
        "--out",
        &s("resumed"),
        "--resume",
        &s("run/epoch_1.ckpt"),
        "--epochs",
        "2",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        std::fs::read(d.join("resumed/epoch_2.ckpt")).unwrap(),
        std::fs::read(d.join("run/epoch_2.ckpt")).unwrap()
    );

    let o = mvalign(&[
        "eval",
        &s("run/epoch_2.ckpt"),
        "--out",
        &s("eval"),
        "--knn",
        "3",
        "--queries",
        "4",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(text(&o).starts_with("accuracy "));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("eval/probe.json")).unwrap()).unwrap();
    assert!(report["accuracy"].as_f64().unwrap() >= 0.0);
    let knn = std::fs::read_to_string(d.join("eval/knn.csv")).unwrap();
    assert_eq!(knn.lines().count(), 5);
    assert!(checkpoint_load(&d.join("run/epoch_2.ckpt")).is_ok());
}

#[test]
fn metric_on_identical_files_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let ds = synth_generate(&SynthSpec::default(), 50).unwrap();
    let a = dir.path().join("a.mvds");
    let b = dir.path().join("b.mvds");
    ds.single_view(0).unwrap().save_mvds(&a).unwrap();
    ds.single_view(1).unwrap().save_mvds(&b).unwrap();
    let (a, b) = (a.to_str().unwrap(), b.to_str().unwrap());
    for kind in ["kl", "swd", "gswd"] {
        let o = mvalign(&["metric", "--kind", kind, a, a]);
        assert!(
            o.status.success(),
            "{kind}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
        assert_eq!(text(&o).trim().parse::<f64>().unwrap(), 0.0, "{kind}");
    }
    let o = mvalign(&["metric", "--kind", "swd", "--p", "2", a, b]);
    assert!(o.status.success());
    assert!(text(&o).trim().parse::<f64>().unwrap() > 0.0);
    let three = dir.path().join("three.mvds");
    ds.save_mvds(&three).unwrap();
    assert_eq!(
        mvalign(&["metric", a, three.to_str().unwrap()])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn grad_check_passes() {
    let o = mvalign(&["grad-check"]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    assert!(text(&o).contains("max relative error"));
}

#[test]
fn exit_codes() {
    assert_eq!(mvalign(&[]).status.code(), Some(1));
    assert_eq!(mvalign(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(
        mvalign(&["metric", "--kind", "emd", "a", "b"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(mvalign(&["--help"]).status.code(), Some(0));
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.ckpt");
    let o = mvalign(&[
        "eval",
        missing.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"alpha": 0, "beta": 0}"#).unwrap();
    let o = mvalign(&[
        "train",
        "--config",
        bad.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(mvalign(&["train"]).status.code(), Some(2));
}

#[test]
fn sweep_writes_one_row_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("sweep");
    let o = mvalign(&[
        "sweep",
        "--config",
        &cfg,
        "--out",
        out.to_str().unwrap(),
        "--values",
        "0.01,1",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 6);
    for (i, r) in rows.iter().enumerate() {
        assert!(r.starts_with(&format!("{i},")));
        assert!(out.join(format!("cell_{i:03}/metrics.csv")).exists());
    }
}
