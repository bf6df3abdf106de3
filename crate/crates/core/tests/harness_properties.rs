use std::path::Path;

use lanenum::harness::{
    compare, evaluate, predict_overlay, train, train_on, CompareConfig, Predictor, TrainConfig,
    TrainedModel,
};
use lanenum::maskgeom::HeuristicConfig;
use lanenum::models::{build_config, Scale, Variant};
use lanenum::scene::{read_dataset, write_dataset, Dataset, DatasetRequest, SplitName};
use lanenum::tensor::{read_model, TrainState};

fn dataset(dir: &Path, count: usize, seed: u64, p: f64) -> Dataset {
    let mut req = DatasetRequest::new(count, seed);
    req.corruption.line_dropout_p = p;
    req.corruption.pixel_flip_q = if p > 0.0 { 0.002 } else { 0.0 };
    write_dataset(dir, &req, 1).unwrap();
    read_dataset(dir).unwrap()
}

#[test]
fn loss_falls_over_the_first_five_epochs() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(dir.path(), 1000, 6, 0.0);
    let out = train_on(
        &ds,
        &TrainConfig::new(dir.path(), Variant::A, Scale::Desk, 5, 1),
        |_| {},
    )
    .unwrap();
    assert!(out.log[4].mean_loss < out.log[0].mean_loss, "{:?}", out.log);
}

#[test]
fn zero_learning_rate_keeps_initial_weights() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(dir.path(), 100, 2, 0.3);
    let mut cfg = TrainConfig::new(dir.path(), Variant::D { n: 1 }, Scale::Desk, 1, 9);
    cfg.lr = 0.0;
    let out = train_on(&ds, &cfg, |_| {}).unwrap();
    let init =
        TrainState::<f32>::new(&build_config(cfg.variant, cfg.scale).unwrap(), cfg.seed).unwrap();
    let (after, before) = (out.model.state.params(), init.params());
    assert_eq!(after.len(), before.len());
    for (a, b) in after.iter().zip(&before) {
        assert_eq!(a.value, b.value, "{}", a.name);
    }
}

#[test]
fn evaluation_leaves_files_untouched_and_repeats_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let ds = dataset(&data, 150, 3, 0.3);
    let model = dir.path().join("m.lnm");
    let log = dir.path().join("m.log");
    train(
        &TrainConfig::new(&data, Variant::C, Scale::Desk, 2, 4),
        &model,
        &log,
    )
    .unwrap();
    let snapshot = |p: &Path| std::fs::read(p).unwrap();
    let before: Vec<Vec<u8>> = [
        model.clone(),
        data.join("samples.bin"),
        data.join("manifest.json"),
        data.join("split.json"),
    ]
    .iter()
    .map(|p| snapshot(p))
    .collect();
    let predictor = Predictor::Model(TrainedModel::from_file(read_model(&model).unwrap()).unwrap());
    let first = evaluate(&predictor, &ds, SplitName::Test).unwrap();
    let again = evaluate(
        &Predictor::Model(TrainedModel::from_file(read_model(&model).unwrap()).unwrap()),
        &read_dataset(&data).unwrap(),
        SplitName::Test,
    )
    .unwrap();
    assert_eq!(first, again);
    let after: Vec<Vec<u8>> = [
        model,
        data.join("samples.bin"),
        data.join("manifest.json"),
        data.join("split.json"),
    ]
    .iter()
    .map(|p| snapshot(p))
    .collect();
    assert!(before == after);

    let counts = ds
        .subset(SplitName::Test)
        .iter()
        .fold([0usize; 5], |mut c, s| {
            c[s.label as usize] += 1;
            c
        });
    for (k, row) in first.confusion.iter().enumerate() {
        assert_eq!(row.iter().sum::<usize>(), counts[k]);
    }
}

#[test]
fn overlay_digit_matches_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(dir.path(), 60, 8, 0.3);
    let heuristic = Predictor::Heuristic(HeuristicConfig::default());
    let test = ds.subset(SplitName::Test);
    let predicted = heuristic.predict(&test).unwrap();
    for (s, &want) in test.iter().zip(&predicted) {
        let digit = predict_overlay(&heuristic, s, &dir.path().join("o.ppm")).unwrap();
        assert_eq!(digit, want);
    }
}

#[test]
fn compare_reports_the_heuristic_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(dir.path(), 120, 10, 0.3);
    let table = compare(&ds, &CompareConfig::new(Scale::Desk, vec![1], 1), |_| {}).unwrap();
    let direct = evaluate(
        &Predictor::Heuristic(HeuristicConfig::default()),
        &ds,
        SplitName::Test,
    )
    .unwrap();
    assert_eq!(table.rows.len(), 4);
    assert_eq!(table.row("B").unwrap().median_accuracy, direct.accuracy);
    let text = table.to_text();
    assert!(text.contains("FLOPs") && text.contains("Params") && text.contains("Accuracy"));
}

#[test]
fn heuristic_is_near_perfect_without_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(dir.path(), 500, 2024, 0.0);
    let m = evaluate(
        &Predictor::Heuristic(HeuristicConfig::default()),
        &ds,
        SplitName::Test,
    )
    .unwrap();
    assert!(m.accuracy >= 0.99, "{m}");
}

#[test]
fn variant_d_needs_temporal_masks() {
    let dir = tempfile::tempdir().unwrap();
    let mut req = DatasetRequest::new(20, 1);
    req.generator.temporal_radius = 0;
    write_dataset(dir.path(), &req, 1).unwrap();
    let ds = read_dataset(dir.path()).unwrap();
    let Err(err) = train_on(
        &ds,
        &TrainConfig::new(dir.path(), Variant::D { n: 1 }, Scale::Desk, 1, 1),
        |_| {},
    ) else {
        panic!("variant D trained without t±1 masks");
    };
    assert_eq!(err.exit_code(), 3, "{err}");
}
