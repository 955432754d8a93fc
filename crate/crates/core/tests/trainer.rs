use mvalign::discrepancy::MetricKind;
use mvalign::loco::NegativeSource;
use mvalign::trainer::{
    checkpoint_load, checkpoint_save, critic_phase, encode_checkpoint, encoder_phase, train,
    DatasetSpec, Objective, TrainConfig, TrainState, METRICS_HEADER,
};
use mvalign::views::SynthSpec;

fn small(seed: u64) -> TrainConfig {
    TrainConfig {
        gamma: 0.5,
        slices: 6,
        critic_hidden: vec![6],
        critic_steps: 2,
        batch_size: 16,
        negatives: 8,
        seed,
        epochs: 2,
        dataset: DatasetSpec {
            n: 48,
            synth: SynthSpec {
                latent_dim: 4,
                view_dims: vec![6, 5, 4],
                seed,
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
    }
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let out = train(small(1), dir.path()).unwrap();
    let a = dir.path().join("a.ckpt");
    checkpoint_save(&out.state, &a).unwrap();
    let back = checkpoint_load(&a).unwrap();
    assert_eq!(
        encode_checkpoint(&back).unwrap(),
        std::fs::read(&a).unwrap()
    );
    assert_eq!(back.global_step, out.state.global_step);
    assert_eq!(back.encoder_fingerprint(), out.state.encoder_fingerprint());

    let mut bytes = std::fs::read(&a).unwrap();
    bytes[1] ^= 0xff;
    let bad = dir.path().join("bad.ckpt");
    std::fs::write(&bad, &bytes).unwrap();
    assert!(checkpoint_load(&bad).is_err());
    let bytes = std::fs::read(&a).unwrap();
    std::fs::write(&bad, &bytes[..bytes.len() / 2]).unwrap();
    assert!(checkpoint_load(&bad).is_err());
}

#[test]
fn same_seed_same_metrics() {
    let (d1, d2, d3) = (
        tempfile::tempdir().unwrap(),
        tempfile::tempdir().unwrap(),
        tempfile::tempdir().unwrap(),
    );
    train(small(7), d1.path()).unwrap();
    train(small(7), d2.path()).unwrap();
    train(small(8), d3.path()).unwrap();
    let read =
        |d: &tempfile::TempDir| std::fs::read_to_string(d.path().join("metrics.csv")).unwrap();
    let m = read(&d1);
    assert_eq!(m, read(&d2));
    assert_ne!(m, read(&d3));
    assert_eq!(m.lines().next().unwrap(), METRICS_HEADER);
    // 48 samples in batches of 16 over two epochs
    assert_eq!(m.lines().count(), 1 + 6);
    for p in ["epoch_0.ckpt", "epoch_1.ckpt", "epoch_2.ckpt"] {
        assert_eq!(
            std::fs::read(d1.path().join(p)).unwrap(),
            std::fs::read(d2.path().join(p)).unwrap()
        );
    }
}

#[test]
fn phases_touch_only_their_parameters() {
    for metric in [MetricKind::Gswd, MetricKind::DualWd] {
        let cfg = TrainConfig { metric, ..small(3) };
        let data = cfg.dataset.load().unwrap();
        let mut state = TrainState::for_dataset(cfg, &data).unwrap();
        let batch = data.batch(&(0..16).collect::<Vec<_>>()).unwrap();
        let (enc, crit) = (state.encoder_fingerprint(), state.critic_fingerprint());
        assert!(critic_phase(&mut state, &batch).unwrap().is_some());
        assert_eq!(state.encoder_fingerprint(), enc, "{metric:?}");
        let crit2 = state.critic_fingerprint();
        assert_ne!(crit2, crit, "{metric:?}");
        encoder_phase(&mut state, &batch).unwrap();
        assert_ne!(state.encoder_fingerprint(), enc);
        assert_eq!(state.critic_fingerprint(), crit2);
    }
}

#[test]
fn logged_total_is_weighted_sum() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(4);
    let gamma = cfg.gamma;
    let out = train(cfg, dir.path()).unwrap();
    for r in &out.rows {
        let want = r.loss_loco + gamma * r.loss_gloco;
        assert!(
            (r.loss_total - want).abs() <= 1e-12 * want.abs().max(1.0),
            "{r:?}"
        );
    }
    let dir = tempfile::tempdir().unwrap();
    let out = train(
        TrainConfig {
            objective: Objective::Loco,
            ..small(4)
        },
        dir.path(),
    )
    .unwrap();
    assert!(out.rows.iter().all(|r| r.loss_total == r.loss_loco));
}

#[test]
fn zero_epochs_writes_only_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = train(
        TrainConfig {
            epochs: 0,
            ..small(5)
        },
        dir.path(),
    )
    .unwrap();
    assert!(out.rows.is_empty());
    let mut files: Vec<String> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    files.sort();
    assert_eq!(files, vec!["epoch_0.ckpt", "metrics.csv"]);
}

#[test]
fn config_json() {
    let c = small(9);
    assert_eq!(TrainConfig::from_json(&c.to_json()).unwrap(), c);
    assert!(TrainConfig::from_json(r#"{"gama": 0.1}"#).is_err());
    assert!(TrainConfig {
        alpha: 0.0,
        beta: 0.0,
        ..small(9)
    }
    .validate()
    .is_err());
    assert!(TrainConfig {
        batch_size: 1,
        ..small(9)
    }
    .validate()
    .is_err());
    assert!(TrainConfig {
        lr_omega: 0.0,
        ..small(9)
    }
    .validate()
    .is_err());
    let dir = tempfile::tempdir().unwrap();
    assert!(train(
        TrainConfig {
            negatives: 40,
            ..small(9)
        },
        dir.path()
    )
    .is_err());
}

#[test]
fn loco_decreases_with_minibatch_negatives() {
    let cfg = TrainConfig {
        negatives_source: NegativeSource::Minibatch,
        epochs: 15,
        ..small(6)
    };
    let dir = tempfile::tempdir().unwrap();
    let out = train(cfg, dir.path()).unwrap();
    let mean = |rows: &[mvalign::trainer::MetricsRow]| {
        rows.iter().map(|r| r.loss_loco).sum::<f64>() / rows.len() as f64
    };
    let (head, tail) = (mean(&out.rows[..6]), mean(&out.rows[out.rows.len() - 6..]));
    assert!(tail < head, "{head} -> {tail}");
}
