use geovit::data::{ambiguity_sites, generate_dataset, Dataset, Split, TileRecord};
use geovit::fusion::{FusionConfig, Placement, Strategy};
use geovit::harness::{evaluate, load_model, train, RunConfig};
use geovit::loc::Granularity;
use geovit::par::Execution;
use geovit::Error;

fn small_config(epochs: usize) -> RunConfig {
    RunConfig {
        epochs,
        per_device_batch: 2,
        pyramid_channels: 16,
        loc_hidden: 32,
        fusion: Some(FusionConfig::new(Strategy::Concat, Placement::Post, Granularity::L10)),
        ..RunConfig::default()
    }
}

/// Generated tiles; a zero count drops that split entirely.
fn tiles(per_site: [usize; 3]) -> Vec<TileRecord> {
    let counts = per_site.map(|n| n.max(1));
    let all = generate_dataset(&ambiguity_sites(counts, 32), 3, true, Execution::Sequential).unwrap();
    all.into_iter().filter(|t| per_site[usize::from(t.split.code())] > 0).collect()
}

fn one_tile() -> Dataset {
    let t = tiles([1, 0, 0]).remove(0);
    let val = TileRecord { split: Split::Val, ..t.clone() };
    Dataset { tiles: vec![t, val] }
}

#[test]
fn single_tile_overfits() {
    let data = one_tile();
    let mut config = small_config(10);
    config.per_device_batch = 1;
    config.lr = 1e-4;
    let out = train(&config, &data, Execution::default()).unwrap();
    let losses = &out.step_losses;
    assert_eq!(losses.len(), 10);
    assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");

    // at 1e-3 the normalized first steps overshoot once or twice, but the
    // loss still falls well below its start
    config.lr = 1e-3;
    let losses = train(&config, &data, Execution::default()).unwrap().step_losses;
    assert!(losses[9] < 0.6 * losses[0], "{losses:?}");

    config.epochs = 150;
    let out = train(&config, &data, Execution::default()).unwrap();
    let e = evaluate(&out.model, &out.store, &data.split(Split::Train), Execution::default()).unwrap();
    assert!(e.metrics.f1 > 0.99, "{:?}", e.metrics);
    let again = evaluate(&out.model, &out.store, &data.split(Split::Train), Execution::Sequential).unwrap();
    assert_eq!(e, again);
}

#[test]
fn runs_are_deterministic_across_schedules() {
    let data = Dataset { tiles: tiles([3, 1, 0]) };
    let config = small_config(2);
    let a = train(&config, &data, Execution::Sequential).unwrap();
    let b = train(&config, &data, Execution::Parallel).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.step_losses, b.step_losses);
    assert!(a.store.iter().zip(b.store.iter()).all(|(x, y)| x.2 == y.2));
}

#[test]
fn checkpoint_round_trip_preserves_metrics() {
    let data = Dataset { tiles: tiles([2, 1, 1]) };
    let dir = tempfile::tempdir().unwrap();
    let mut config = small_config(2);
    config.out = Some(dir.path().to_path_buf());
    let out = train(&config, &data, Execution::default()).unwrap();
    let before = evaluate(&out.model, &out.store, &data.split(Split::Test), Execution::default()).unwrap();

    let (model, store, loaded) = load_model(&dir.path().join("best.gvck")).unwrap();
    assert_eq!(loaded, out.config);
    let after = evaluate(&model, &store, &data.split(Split::Test), Execution::default()).unwrap();
    assert_eq!(before, after);

    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "epoch,split,pixel_accuracy,precision,recall,f1,miou,loss");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("0,val,"));
}

#[test]
fn invalid_runs_fail_early() {
    let data = one_tile();
    let mut config = small_config(1);
    config.fusion = Some(FusionConfig::new(Strategy::Add, Placement::Pre, Granularity::L10));
    assert!(matches!(train(&config, &data, Execution::default()), Err(Error::Config(_))));

    let mut config = small_config(1);
    config.n_classes = 2;
    let data = Dataset { tiles: tiles([1, 1, 0]) };
    assert!(matches!(
        train(&config, &data, Execution::default()),
        Err(Error::ClassMismatch { model: 2, data: 3 })
    ));

    let config = small_config(1);
    let no_val = Dataset { tiles: tiles([1, 0, 0]) };
    assert!(matches!(train(&config, &no_val, Execution::default()), Err(Error::Empty(_))));
}

#[test]
fn evaluating_an_empty_split_is_an_error() {
    let data = one_tile();
    let out = train(&small_config(1), &data, Execution::default()).unwrap();
    assert!(matches!(
        evaluate(&out.model, &out.store, &data.split(Split::Test), Execution::default()),
        Err(Error::Empty(_))
    ));
}

#[test]
fn non_finite_loss_aborts_with_context() {
    let mut data = one_tile();
    data.tiles[0].raster[5] = f32::NAN;
    let mut config = small_config(1);
    config.per_device_batch = 1;
    match train(&config, &data, Execution::default()) {
        Err(Error::NanLoss { epoch, step, lr, batch }) => {
            assert_eq!((epoch, step, batch), (0, 0, vec![0]));
            assert_eq!(lr, config.lr);
        }
        other => panic!("expected NanLoss, got {:?}", other.map(|o| o.best_epoch)),
    }
}
