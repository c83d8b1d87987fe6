use lego_slam::dataset::{read_dataset, write_dataset};
use lego_slam::pipeline::{map_digest, metrics_csv, pretrain_models, run_pipeline, Models};
use lego_slam::synthetic::{default_orbit, room_scene, RoomOptions};
use lego_slam::{Dataset, Raster, RunConfig, RunResult};
use once_cell::sync::Lazy;

fn small_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    for (k, v) in [
        ("feature_dim", "8"),
        ("codec_hidden", "16"),
        ("pretrain_epochs", "20"),
        ("pretrain_batch", "128"),
        ("corpus_per_class", "100"),
        ("codebook_k", "8"),
        ("map_samples", "3000"),
        ("mapping_iters", "8"),
        ("adapt_warmup", "20"),
        ("adapt_steps", "5"),
        ("prune_period", "30"),
        ("loop_recency_gap", "2"),
    ] {
        cfg.set(k, v).unwrap();
    }
    cfg
}

struct Fixture {
    dataset: Dataset,
    models: Models,
}

static FIX: Lazy<Fixture> = Lazy::new(|| {
    let opts = RoomOptions {
        classes: 4,
        feature_dim: 16,
        width: 32,
        height: 32,
        frames: 200,
        seed: 5,
    };
    let spec = room_scene(&opts, default_orbit());
    let frames = (0..12).map(|i| spec.render_frame(i, 5)).collect();
    let models = pretrain_models(&small_config(), &spec).unwrap();
    Fixture {
        dataset: Dataset::from_synthetic(&spec, frames),
        models,
    }
});

fn run(cfg: &RunConfig, ds: &Dataset) -> RunResult {
    run_pipeline(
        cfg,
        ds,
        Some(FIX.models.codec.clone()),
        Some(FIX.models.codebook.clone()),
    )
    .unwrap()
}

fn without_fps(csv: &str) -> String {
    let mut lines: Vec<&str> = csv.lines().collect();
    let last = lines.pop().unwrap();
    let kept = last.rsplit_once(',').unwrap().0;
    lines.join("\n") + "\n" + kept
}

#[test]
fn runs_are_bitwise_reproducible() {
    let cfg = small_config();
    let a = run(&cfg, &FIX.dataset);
    let b = run(&cfg, &FIX.dataset);
    assert_eq!(a.trajectory.len(), 12);
    assert!(a.tracking_lost.is_none());
    assert_eq!(a.trajectory, b.trajectory);
    assert_eq!(map_digest(&a.map), map_digest(&b.map));
    assert_eq!(without_fps(&metrics_csv(&a)), without_fps(&metrics_csv(&b)));
    let ate = a.ate_rmse.unwrap();
    assert!(ate < 0.05, "ate {ate}");
    assert!(a.miou.is_some() && a.accuracy.is_some());
}

#[test]
fn disabling_loop_closure_leaves_an_empty_log() {
    let mut cfg = small_config();
    cfg.loop_closure = false;
    let r = run(&cfg, &FIX.dataset);
    assert!(r.loop_events.is_empty());
    assert_eq!(r.loop_closures, 0);
}

#[test]
fn losing_tracking_returns_the_partial_run() {
    let mut ds = FIX.dataset.clone();
    let k = ds.intrinsics;
    ds.frames[6].depth = Raster::zeros(k.width, k.height, 1);
    let r = run(&small_config(), &ds);
    assert_eq!(r.tracking_lost, Some(6));
    assert_eq!(r.trajectory.len(), 6);
    assert!(!r.map.is_empty());
}

#[test]
fn dataset_survives_a_disk_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = FIX.dataset.scene.clone().unwrap();
    spec.frames = FIX.dataset.frames.len();
    write_dataset(dir.path(), &spec, &FIX.dataset.frames).unwrap();
    let back = read_dataset(dir.path()).unwrap();
    assert_eq!(back.frames.len(), FIX.dataset.frames.len());
    let cfg = small_config();
    let a = run(&cfg, &FIX.dataset);
    let b = run(&cfg, &back);
    assert_eq!(a.trajectory.len(), b.trajectory.len());
    let gap = a
        .trajectory
        .iter()
        .zip(&b.trajectory)
        .map(|((_, p), (_, q))| (p.translation - q.translation).norm())
        .fold(0.0, f64::max);
    assert!(gap < 5e-3, "{gap}");
}

#[test]
fn unknown_config_key_is_rejected() {
    assert!(RunConfig::parse("no_such_key = 1\n").is_err());
    assert!(RunConfig::parse("feature_dim = many\n").is_err());
    let cfg = RunConfig::parse(&small_config().to_text()).unwrap();
    assert_eq!(cfg, small_config());
}
