//! End-to-end training behavior on small synthetic problems.

use tac_core::codebook::CodeBook;
use tac_core::data::*;
use tac_core::losses::LossConfig;
use tac_core::model::*;
use tac_core::profile::{ProfileTransform, ProjectionKind};
use tac_core::rng::SplitMix64;

fn blobs(per_class: usize, separation: f64) -> (Dataset, Dataset) {
    let ds = synth_blobs(&BlobSpec::new(3, 8, per_class, separation, 1.0, 0)).unwrap();
    let (train, test) = train_test_split(&ds, ds.len() / 4, 0).unwrap();
    let norm = Normalization::fit(&train, NormalizationMode::PerFeature).unwrap();
    (norm.apply(&train).unwrap(), norm.apply(&test).unwrap())
}

fn mlp(head: Option<usize>, seed: u64) -> BaseClassifier {
    let arch = Architecture::mlp(8, &[64, 64], Activation::LeakyRelu { slope: 0.01 }, head);
    BaseClassifier::init(arch, &mut SplitMix64::stream(seed, "init")).unwrap()
}

const TAPS: [Tap; 2] = [Tap { layer: 1, n_slices: 8 }, Tap { layer: 2, n_slices: 8 }];

fn config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 32,
        optimizer: OptimizerConfig::adam(1e-3),
        seed: 0,
    }
}

fn scratch_model(seed: u64) -> TacModel {
    TacModel::scratch(mlp(None, seed), &TAPS, CodeBook::generate(3, 16, 0).unwrap(), LossConfig::default(), ProfileTransform::Sigmoid).unwrap()
}

#[test]
fn scratch_training_separates_easy_blobs() {
    let (train, test) = blobs(100, 6.0);
    let mut model = scratch_model(0);
    let log = fit(&mut model, &train, Some(&test), &config(100)).unwrap();
    let last = log.epochs.last().unwrap();
    assert!(last.loss < log.epochs[0].loss);
    assert!(last.val_accuracy.unwrap() >= 0.95, "{last:?}");
    assert!(last.l_bin.is_some() && last.l_ce.is_some() && last.mean_correct_distance.is_some());
}

#[test]
fn training_is_deterministic() {
    let (train, test) = blobs(30, 4.0);
    let run = || {
        let mut model = scratch_model(3);
        let log = fit(&mut model, &train, Some(&test), &config(3)).unwrap();
        (model.to_json(), serde_json::to_string(&log).unwrap())
    };
    assert_eq!(run(), run());
}

#[test]
fn zero_epochs_leave_the_model_untouched() {
    let (train, _) = blobs(10, 4.0);
    let mut model = scratch_model(4);
    let before = model.to_json();
    let log = fit(&mut model, &train, None, &config(0)).unwrap();
    assert!(log.epochs.is_empty());
    assert_eq!(model.to_json(), before);
}

#[test]
fn addon_training_keeps_the_base_frozen() {
    let (train, test) = blobs(100, 6.0);
    let mut base = mlp(Some(3), 5);
    fit_base(&mut base, &train, Some(&test), &config(15)).unwrap();
    let head_before = base.logits(&test.gather(&(0..test.len()).collect::<Vec<_>>()).unwrap().0).unwrap();
    let checksum = params_checksum(&base.params);
    let addon = AddonSpec { kind: ProjectionKind::Large, slice_size: 4 };
    let mut model = TacModel::addon(
        base,
        &TAPS,
        addon,
        CodeBook::generate(3, 16, 0).unwrap(),
        LossConfig::default(),
        ProfileTransform::Sigmoid,
        &mut SplitMix64::stream(5, "projection"),
    )
    .unwrap();
    fit_addon(&mut model, &train, Some(&test), &config(15)).unwrap();
    assert_eq!(params_checksum(&model.base.params), checksum);
    let head_after = model.base.logits(&test.gather(&(0..test.len()).collect::<Vec<_>>()).unwrap().0).unwrap();
    assert_eq!(head_before, head_after);
}

#[test]
fn capacity_test_memorizes_random_labels() {
    let ds = synth_blobs(&BlobSpec::new(4, 20, 64, 1.0, 1.0, 0)).unwrap();
    let ds = Normalization::fit(&ds, NormalizationMode::PerFeature).unwrap().apply(&ds).unwrap();
    let arch = Architecture::mlp(20, &[256, 256], Activation::LeakyRelu { slope: 0.01 }, None);
    let base = BaseClassifier::init(arch, &mut SplitMix64::stream(0, "init")).unwrap();
    let taps = [Tap { layer: 1, n_slices: 16 }, Tap { layer: 2, n_slices: 16 }];
    let mut model = TacModel::scratch(base, &taps, CodeBook::generate(4, 32, 0).unwrap(), LossConfig::default(), ProfileTransform::Sigmoid).unwrap();
    let series = capacity_test(&mut model, &ds, &TrainConfig { batch_size: 16, ..config(150) }, 0).unwrap();
    assert_eq!(series.len(), 151);
    assert!((series[0].error - 0.75).abs() < 0.1, "{:?}", series[0]);
    assert_eq!(series.last().unwrap().error, 0.0, "{:?}", &series[series.len() - 5..]);
}
