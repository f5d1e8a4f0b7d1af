use cst_core::backbone::{hsic_n, train_dm, train_udm_with_weights, BackboneConfig};
use cst_core::cst::{cst_objective, cvat_loss_at, impute_pseudolabels, PseudolabelTable};
use cst_core::data::{all_action_inputs, BanditDataset};
use cst_core::eval::{full_nll, hamming_loss, mean_stderr};
use cst_core::ingest::{parse_libsvm_multilabel_with, MultiLabelDataset, ParseOptions};
use cst_core::loss::{cross_entropy, kl_divergence, softmax_rows};
use cst_core::synth::{demand_prob, make_demand_spec, sample_bandit_dataset, DemandKind, LoggingPolicy};
use cst_core::train::TrainConfig;
use cst_core::{Matrix, MlpModel, Mode, ModelConfig, Prng};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize, scale: f64) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-scale..scale, rows * cols).prop_map(move |v| Matrix::from_vec(rows, cols, v).unwrap())
}

fn model_for(seed: u64, dims: &[usize]) -> MlpModel {
    MlpModel::new(dims, ModelConfig::default(), &mut Prng::new(seed)).unwrap()
}

fn small_bandit(seed: u64, n: usize, actions: usize) -> BanditDataset {
    let mut rng = Prng::new(seed);
    let x = Matrix::from_vec(n, 3, (0..n * 3).map(|_| rng.uniform()).collect()).unwrap();
    let a = (0..n).map(|_| rng.index(actions)).collect();
    let r = (0..n).map(|_| rng.index(2)).collect();
    BanditDataset::new(x, a, r, actions, 2, None, None).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn forward_rows_are_distributions(seed in 0u64..1000, x in matrix(6, 4, 50.0), train in any::<bool>()) {
        let model = model_for(seed, &[4, 8, 3]);
        let mode = if train { Mode::Train } else { Mode::Eval };
        let (p, _) = model.forward(&x, mode, &mut Prng::new(seed)).unwrap();
        for row in p.iter_rows() {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn eval_mode_is_mask_free(seed in 0u64..1000, x in matrix(5, 4, 3.0)) {
        let model = model_for(seed, &[4, 6, 6, 2]);
        let mut no_dropout = model.clone();
        no_dropout.set_dropout(0.0).unwrap();
        let (a, _) = model.forward(&x, Mode::Eval, &mut Prng::new(1)).unwrap();
        let (b, _) = no_dropout.forward(&x, Mode::Train, &mut Prng::new(2)).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn kl_is_nonnegative_and_zero_on_diagonal(p in matrix(4, 3, 5.0), q in matrix(4, 3, 5.0)) {
        let (p, q) = (softmax_rows(&p), softmax_rows(&q));
        prop_assert!(kl_divergence(&p, &q).unwrap().value >= -1e-12);
        prop_assert!(kl_divergence(&p, &p).unwrap().value.abs() < 1e-12);
        prop_assert!(cross_entropy(&q, &p, None).unwrap().value >= 0.0);
    }

    #[test]
    fn hsic_is_nonnegative(z in matrix(12, 3, 2.0), actions in prop::collection::vec(0usize..3, 12)) {
        let mut a = Matrix::zeros(12, 3);
        for (i, &k) in actions.iter().enumerate() {
            a.set(i, k, 1.0);
        }
        prop_assert!(hsic_n(&a, &z, 0.5).unwrap() >= -1e-9);
    }

    #[test]
    fn imputation_never_raises_the_objective(seed in 0u64..500, actions in 2usize..5) {
        let data = small_bandit(seed, 15, actions);
        let first = model_for(seed, &[3 + actions, 6, 2]);
        let second = model_for(seed + 1, &[3 + actions, 6, 2]);
        let mut table = impute_pseudolabels(&first, &data).unwrap();
        let before = cst_objective(&second, &data, &table).unwrap();
        let old: PseudolabelTable = table.clone();
        table.reimpute(&second, &data).unwrap();
        let after = cst_objective(&second, &data, &table).unwrap();
        prop_assert!(after <= before, "{} > {}", after, before);

        // every alternative one-hot choice costs at least as much per cell
        let probs = second.predict(&all_action_inputs(&data.features, actions)).unwrap();
        for i in 0..data.len() {
            for a in 0..actions {
                let p = probs.row(i * actions + a);
                if table.is_factual(i, a) {
                    prop_assert_eq!(table.label(i, a), data.outcomes[i]);
                    prop_assert_eq!(old.label(i, a), data.outcomes[i]);
                } else {
                    let chosen = p[table.label(i, a)];
                    prop_assert!(p.iter().all(|&other| other <= chosen));
                }
                let hot = table.one_hot(i, a);
                prop_assert_eq!(hot.iter().filter(|&&v| v == 1.0).count(), 1);
                prop_assert_eq!(hot.iter().sum::<f64>(), 1.0);
            }
        }
    }

    #[test]
    fn cvat_at_snapshot_point_is_stationary(seed in 0u64..500) {
        // z = 0 and a snapshot taken from the live model: the loss is at its minimum
        let model = model_for(seed, &[5, 6, 2]);
        let mut rng = Prng::new(seed);
        let clean = Matrix::from_vec(4, 5, (0..20).map(|_| rng.uniform()).collect()).unwrap();
        let snapshot = model.predict(&clean).unwrap();
        let z = Matrix::zeros(2, 3);
        let lg = cvat_loss_at(&model, &clean, &snapshot, &z, Mode::Eval, &mut rng).unwrap();
        prop_assert!(lg.value.abs() < 1e-15);
        prop_assert!(lg.grads.max_abs() < 1e-15);
    }

    #[test]
    fn metrics_stay_in_range(seed in 0u64..500) {
        let mut rng = Prng::new(seed);
        let spec = make_demand_spec(DemandKind::ALL[(seed % 5) as usize], &mut rng);
        let data = sample_bandit_dataset(&spec, 20, LoggingPolicy::Proportional { wide_denominator: false }, &mut rng).unwrap();
        let model = model_for(seed, &[55, 8, 2]);
        let gt = data.ground_truth.as_ref().unwrap();
        prop_assert!(full_nll(&model, &data.features, gt).unwrap() >= 0.0);
        let h = hamming_loss(&model, &data.features, gt).unwrap();
        prop_assert!((0.0..=1.0).contains(&h));
        let uniform = MlpModel::zeros(&[55, 8, 2], ModelConfig::default()).unwrap();
        prop_assert!((full_nll(&uniform, &data.features, gt).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn policies_are_distributions(x in prop::collection::vec(0.0f64..1.0, 50), o in 0.0f64..5.0) {
        for policy in [LoggingPolicy::Proportional { wide_denominator: false }, LoggingPolicy::Softmax { overlap: o }, LoggingPolicy::Uniform] {
            let p = policy.probs(&x, 5);
            prop_assert!(p.iter().all(|&v| v >= 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn generated_outcomes_match_the_table(seed in 0u64..200) {
        let mut rng = Prng::new(seed);
        let spec = make_demand_spec(DemandKind::ALL[(seed % 5) as usize], &mut rng);
        let data = sample_bandit_dataset(&spec, 30, LoggingPolicy::Softmax { overlap: 2.0 }, &mut rng).unwrap();
        let gt = data.ground_truth.as_ref().unwrap();
        for i in 0..data.len() {
            prop_assert_eq!(gt.label(i, data.actions[i]), data.outcomes[i]);
        }
        let mut again = Prng::new(seed);
        let spec2 = make_demand_spec(spec.kind, &mut again);
        let data2 = sample_bandit_dataset(&spec2, 30, LoggingPolicy::Softmax { overlap: 2.0 }, &mut again).unwrap();
        prop_assert_eq!(data, data2);
    }

    #[test]
    fn demand_falls_with_price(seed in 0u64..200, x in prop::collection::vec(0.0f64..1.0, 50)) {
        let spec = make_demand_spec(DemandKind::D2, &mut Prng::new(seed));
        for p in 1..5 {
            prop_assert!(demand_prob(&spec, &x, (p + 1) as f64) < demand_prob(&spec, &x, p as f64));
        }
        // D1 and D5 have nonnegative price coefficients
        for kind in [DemandKind::D1, DemandKind::D5] {
            let spec = make_demand_spec(kind, &mut Prng::new(seed));
            for p in 1..5 {
                prop_assert!(demand_prob(&spec, &x, (p + 1) as f64) <= demand_prob(&spec, &x, p as f64));
            }
        }
    }

    #[test]
    fn libsvm_round_trip(rows in prop::collection::vec((prop::collection::btree_set(0usize..6, 0..4), prop::collection::vec(prop_oneof![Just(0.0), -1e3f64..1e3], 7)), 1..10)) {
        let n = rows.len();
        let mut x = Matrix::zeros(n, 7);
        let mut sets = Vec::new();
        for (i, (set, feats)) in rows.into_iter().enumerate() {
            x.row_mut(i).copy_from_slice(&feats);
            sets.push(set.into_iter().collect());
        }
        let data = MultiLabelDataset::new(x, sets, 6).unwrap();
        let opts = ParseOptions { num_features: Some(7), num_labels: Some(6), zero_based: Some(false) };
        prop_assert_eq!(parse_libsvm_multilabel_with(&data.to_libsvm(), opts).unwrap(), data);
    }

    #[test]
    fn stderr_of_constant_runs_is_zero(v in -10.0f64..10.0, n in 1usize..8) {
        prop_assert_eq!(mean_stderr(&vec![v; n]).unwrap().1, 0.0);
    }
}

#[test]
fn unit_weight_udm_equals_dm() {
    let data = small_bandit(3, 40, 3);
    let cfg = BackboneConfig {
        train: TrainConfig {
            epochs: 3,
            batch_size: 16,
            ..TrainConfig::default()
        },
        ..BackboneConfig::default()
    };
    let dm = train_dm(&data, &cfg, &mut Prng::new(8)).unwrap();
    let udm = train_udm_with_weights(&data, &[1.0; 40], &cfg, &mut Prng::new(8)).unwrap();
    assert_eq!(dm.model, udm.model);
    assert_eq!(dm.epoch_losses, udm.epoch_losses);
}

#[test]
fn training_is_deterministic_under_seed() {
    let data = small_bandit(4, 40, 3);
    let cfg = BackboneConfig {
        train: TrainConfig {
            epochs: 2,
            batch_size: 8,
            ..TrainConfig::default()
        },
        ..BackboneConfig::default()
    };
    let a = train_dm(&data, &cfg, &mut Prng::new(5)).unwrap();
    let b = train_dm(&data, &cfg, &mut Prng::new(5)).unwrap();
    assert_eq!(a.model, b.model);
}

#[test]
fn empty_libsvm_row_survives_round_trip() {
    let data = MultiLabelDataset::new(Matrix::zeros(2, 3), vec![vec![], vec![1]], 2).unwrap();
    let opts = ParseOptions {
        num_features: Some(3),
        num_labels: Some(2),
        zero_based: Some(false),
    };
    assert_eq!(parse_libsvm_multilabel_with(&data.to_libsvm(), opts).unwrap(), data);
}
