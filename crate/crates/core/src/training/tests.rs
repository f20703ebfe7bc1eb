use super::*;
use crate::model::Variant;
use crate::scene::speech_signal;

fn small_model() -> ModelConfig {
    ModelConfig {
        variant: Variant::ProposedLinear,
        channels: 4,
        blocks: 1,
        heads: 2,
        fft: 64,
        hop: 16,
        compress_exp: 0.3,
        depthwise_kernel: 3,
        densenet_dilations: vec![1, 2],
        max_rel_distance: 8,
        rope_base: 10_000.0,
        ffn_mult: 2,
    }
}

fn scenes(n: usize) -> Vec<LoadedScene> {
    (0..n as u64)
        .map(|i| {
            let near = speech_signal(1_600, 10 + i);
            let far: Vec<f64> = speech_signal(1_600, 100 + i).iter().map(|v| 0.3 * v).collect();
            let mixture = near.iter().zip(&far).map(|(a, b)| a + b).collect();
            LoadedScene { mixture, near, far }
        })
        .collect()
}

fn cfg(steps: u64) -> TrainConfig {
    TrainConfig {
        batch: 2,
        steps,
        seed: 5,
        crop_seconds: Some(0.05),
        checkpoint_every: 3,
        validate_every: 2,
        ..TrainConfig::default()
    }
}

fn fresh() -> Start {
    Start::Fresh {
        model: small_model(),
        init_seed: 1,
    }
}

#[test]
fn same_seed_same_log_and_weights() {
    let data = scenes(10);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = train_scenes(&data, fresh(), &cfg(4), a.path()).unwrap();
    let rb = train_scenes(&data, fresh(), &cfg(4), b.path()).unwrap();
    assert_eq!(ra.log, rb.log);
    let read = |d: &Path, f: &str| std::fs::read(d.join(f)).unwrap();
    assert_eq!(read(a.path(), METRICS_NAME), read(b.path(), METRICS_NAME));
    assert_eq!(read(a.path(), FINAL_CHECKPOINT), read(b.path(), FINAL_CHECKPOINT));
    assert!(ra.log.iter().any(|r| matches!(r, MetricsRecord::Val { .. })));
}

#[test]
fn resume_continues_the_same_trajectory() {
    let data = scenes(4);
    let full = tempfile::tempdir().unwrap();
    let r_full = train_scenes(&data, fresh(), &cfg(6), full.path()).unwrap();
    let part = tempfile::tempdir().unwrap();
    train_scenes(&data, fresh(), &cfg(6), part.path()).unwrap();
    let r_res = train_scenes(&data, Start::Resume(part.path().join("ckpt_000003.dssf")), &cfg(6), part.path()).unwrap();
    let (a, b) = (r_full.losses(), r_res.losses());
    assert_eq!(a.len(), 6);
    assert_eq!(b.len(), 6);
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() <= 1e-6 * x.abs(), "{x} {y}");
    }
    assert_eq!(r_full.model.values(), r_res.model.values());
}

#[test]
fn loss_goes_down_on_a_fixed_batch() {
    let data = scenes(2);
    let dir = tempfile::tempdir().unwrap();
    let c = TrainConfig {
        batch: 2,
        steps: 40,
        fixed_crops: true,
        crop_seconds: Some(0.05),
        checkpoint_every: 0,
        validate_every: 0,
        ..TrainConfig::default()
    };
    let r = train_scenes(&data, fresh(), &c, dir.path()).unwrap();
    let l = r.losses();
    assert!(l[l.len() - 1] < 0.7 * l[0], "{} -> {}", l[0], l[l.len() - 1]);
}

#[test]
fn ratio_selection() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = crate::scene::CorpusConfig::new(5, crate::scene::Split::Train, dir.path(), 2);
    c.ratio = (60, 40);
    let recs = crate::scene::generate_corpus(&c).unwrap();
    let sel = select_by_ratio(&recs, (50, 50));
    let indoor = sel.iter().filter(|r| r.env == Environment::Indoor).count();
    assert_eq!((sel.len(), indoor), (4, 2));
    assert_eq!(select_by_ratio(&recs, (100, 0)).len(), 3);
}

#[test]
fn bad_configs_rejected() {
    let mut c = TrainConfig::default();
    c.batch = 0;
    assert!(c.validate().is_err());
    let json = r#"{"steps": 3, "lr": 0.1}"#;
    let e = serde_json::from_str::<TrainConfig>(json).unwrap_err().to_string();
    assert!(e.contains("lr"), "{e}");
}
