use cst_core::synth::{make_demand_spec, sample_bandit_dataset, DemandKind, LoggingPolicy};
use cst_core::{DropoutPlacement, MlpModel, ModelConfig, Prng};
use cst_harness::formats::{load_dataset, load_model, model_from_str, model_to_string, save_dataset, save_model};
use cst_harness::HarnessError;
use proptest::prelude::*;
use std::path::Path;

fn random_model(seed: u64, placement: DropoutPlacement) -> MlpModel {
    let cfg = ModelConfig {
        leaky_slope: 0.2,
        dropout_p: 0.3,
        dropout_placement: placement,
    };
    MlpModel::new(&[7, 5, 3, 2], cfg, &mut Prng::new(seed)).unwrap()
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.txt");
    for placement in [DropoutPlacement::EveryHidden, DropoutPlacement::LastHidden] {
        let model = random_model(4, placement);
        let meta = vec![
            ("method".to_string(), "PL+CVAT".to_string()),
            ("note".to_string(), "two words".to_string()),
        ];
        save_model(&path, &model, &meta).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back.model, model);
        assert_eq!(back.meta("note"), Some("two words"));
        assert_eq!(back.meta("missing"), None);
    }
}

#[test]
fn truncated_checkpoint_reports_line() {
    let text = model_to_string(&random_model(1, DropoutPlacement::EveryHidden), &[]);
    let cut: String = text.lines().take(8).map(|l| format!("{l}\n")).collect();
    match model_from_str(&cut, Path::new("m.txt")) {
        Err(HarnessError::Format { line, .. }) => assert_eq!(line, 9),
        other => panic!("expected a format error, got {other:?}"),
    }
    assert!(model_from_str("not a model\n", Path::new("m.txt")).is_err());
}

#[test]
fn dataset_dump_round_trip() {
    let mut rng = Prng::new(9);
    let spec = make_demand_spec(DemandKind::D4, &mut rng);
    let data = sample_bandit_dataset(&spec, 40, LoggingPolicy::Uniform, &mut rng).unwrap();
    let data = cst_core::data::BanditDataset::new(
        data.features.clone(),
        data.actions.clone(),
        data.outcomes.clone(),
        data.num_actions,
        data.num_classes,
        data.ground_truth.clone(),
        Some((0..40).map(|i| 0.1 + i as f64 / 100.0).collect()),
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    save_dataset(&path, &data).unwrap();
    assert_eq!(load_dataset(&path).unwrap(), data);
}

#[test]
fn dataset_with_wrong_width_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    std::fs::write(
        &path,
        "# cst-dataset v1 actions=2 classes=2 features=1 propensities=false ground_truth=false\nx0,action\n0.5,1\n",
    )
    .unwrap();
    assert!(matches!(load_dataset(&path), Err(HarnessError::Format { line: 2, .. })));
}

proptest! {
    #[test]
    fn any_finite_weights_survive_text(weights in prop::collection::vec(-1e300f64..1e300, 6), bias in -1e-300f64..1e-300) {
        let mut model = MlpModel::zeros(&[3, 2], ModelConfig::default()).unwrap();
        model.layers_mut()[0].weights.as_mut_slice().copy_from_slice(&weights);
        model.layers_mut()[0].bias[1] = bias;
        let back = model_from_str(&model_to_string(&model, &[]), Path::new("p")).unwrap();
        prop_assert_eq!(back.model, model);
    }
}
