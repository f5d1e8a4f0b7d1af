//! Central finite differences against the analytic backward pass.

use cst_core::cst::{cst_loss, cvat_loss_at, impute_pseudolabels};
use cst_core::data::{joint_inputs, BanditDataset};
use cst_core::loss::{cross_entropy, kl_divergence};
use cst_core::{Matrix, MlpModel, Mode, ModelConfig, Prng};

const H: f64 = 1e-6;
const TOL: f64 = 1e-4;

fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let scale: f64 =
        analytic.iter().map(|a| a * a).sum::<f64>().sqrt() + numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

fn numeric_param_grad(model: &MlpModel, loss: impl Fn(&MlpModel) -> f64) -> Vec<f64> {
    let mut probe = model.clone();
    let mut out = Vec::with_capacity(model.num_params());
    let shapes: Vec<usize> = model.param_slices().iter().map(|s| s.len()).collect();
    for (s, &len) in shapes.iter().enumerate() {
        for k in 0..len {
            let orig = probe.param_slices()[s][k];
            probe.param_slices_mut()[s][k] = orig + H;
            let up = loss(&probe);
            probe.param_slices_mut()[s][k] = orig - H;
            let down = loss(&probe);
            probe.param_slices_mut()[s][k] = orig;
            out.push((up - down) / (2.0 * H));
        }
    }
    out
}

fn numeric_input_grad(inputs: &Matrix, loss: impl Fn(&Matrix) -> f64) -> Vec<f64> {
    let mut x = inputs.clone();
    let mut out = Vec::with_capacity(x.as_slice().len());
    for k in 0..x.as_slice().len() {
        let orig = x.as_slice()[k];
        x.as_mut_slice()[k] = orig + H;
        let up = loss(&x);
        x.as_mut_slice()[k] = orig - H;
        let down = loss(&x);
        x.as_mut_slice()[k] = orig;
        out.push((up - down) / (2.0 * H));
    }
    out
}

fn flat(grads: &cst_core::Gradients) -> Vec<f64> {
    grads.slices().concat()
}

/// A random model with 1 to 3 layers and every width at most 8.
fn random_model(rng: &mut Prng, input: usize, dropout: f64) -> MlpModel {
    let classes = 2 + rng.index(3);
    random_model_with(rng, input, classes, dropout)
}

fn random_model_with(rng: &mut Prng, input: usize, classes: usize, dropout: f64) -> MlpModel {
    let layers = 1 + rng.index(3);
    let mut dims = vec![input];
    for _ in 1..layers {
        dims.push(2 + rng.index(7));
    }
    dims.push(classes);
    let mut m = MlpModel::new(
        &dims,
        ModelConfig {
            leaky_slope: 0.01,
            dropout_p: dropout,
            ..ModelConfig::default()
        },
        rng,
    )
    .unwrap();
    // move biases off zero so activations sit away from the kink
    for layer in m.layers_mut() {
        for b in &mut layer.bias {
            *b += 0.3;
        }
    }
    m
}

fn random_matrix(rng: &mut Prng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect()).unwrap()
}

fn random_probs(rng: &mut Prng, rows: usize, cols: usize) -> Matrix {
    cst_core::loss::softmax_rows(&random_matrix(rng, rows, cols))
}

#[test]
fn cross_entropy_gradients() {
    let mut rng = Prng::new(11);
    for case in 0..20 {
        let input = 2 + rng.index(7);
        // train mode with a replayed mask stream checks the dropout path too
        let dropout = if case % 2 == 0 { 0.0 } else { 0.3 };
        let model = random_model(&mut rng, input, dropout);
        let x = random_matrix(&mut rng, 5, input);
        let t = random_probs(&mut rng, 5, model.num_classes());
        let w: Vec<f64> = (0..5).map(|_| rng.uniform_range(0.5, 2.0)).collect();
        let seed = rng.index(1 << 30) as u64;
        let loss = |m: &MlpModel, x: &Matrix| {
            let (p, _) = m.forward(x, Mode::Train, &mut Prng::new(seed)).unwrap();
            cross_entropy(&p, &t, Some(&w)).unwrap().value
        };
        let (p, trace) = model.forward(&x, Mode::Train, &mut Prng::new(seed)).unwrap();
        let ce = cross_entropy(&p, &t, Some(&w)).unwrap();
        let (g, dx) = model.backward(&trace, &ce.grad).unwrap();
        let e = rel_err(&flat(&g), &numeric_param_grad(&model, |m| loss(m, &x)));
        assert!(e < TOL, "case {case}: parameter rel err {e}");
        let e = rel_err(dx.as_slice(), &numeric_input_grad(&x, |x| loss(&model, x)));
        assert!(e < TOL, "case {case}: input rel err {e}");
    }
}

#[test]
fn kl_gradients() {
    let mut rng = Prng::new(12);
    for case in 0..20 {
        let input = 2 + rng.index(7);
        let model = random_model(&mut rng, input, 0.0);
        let x = random_matrix(&mut rng, 4, input);
        let target = random_probs(&mut rng, 4, model.num_classes());
        let loss = |m: &MlpModel, x: &Matrix| kl_divergence(&target, &m.predict(x).unwrap()).unwrap().value;
        let (q, trace) = model.forward(&x, Mode::Eval, &mut Prng::new(0)).unwrap();
        let kl = kl_divergence(&target, &q).unwrap();
        let (g, dx) = model.backward(&trace, &kl.grad).unwrap();
        let e = rel_err(&flat(&g), &numeric_param_grad(&model, |m| loss(m, &x)));
        assert!(e < TOL, "case {case}: parameter rel err {e}");
        let e = rel_err(dx.as_slice(), &numeric_input_grad(&x, |x| loss(&model, x)));
        assert!(e < TOL, "case {case}: input rel err {e}");
    }
}

fn random_bandit(rng: &mut Prng, n: usize, d: usize, actions: usize, classes: usize) -> BanditDataset {
    let features = Matrix::from_vec(n, d, (0..n * d).map(|_| rng.uniform()).collect()).unwrap();
    let a = (0..n).map(|_| rng.index(actions)).collect();
    let r = (0..n).map(|_| rng.index(classes)).collect();
    BanditDataset::new(features, a, r, actions, classes, None, None).unwrap()
}

#[test]
fn cst_loss_gradients() {
    let mut rng = Prng::new(13);
    for case in 0..20 {
        let d = 1 + rng.index(4);
        let actions = 2 + rng.index(3);
        let classes = 2 + rng.index(2);
        let data = random_bandit(&mut rng, 6, d, actions, classes);
        let model = random_model_with(&mut rng, d + actions, classes, 0.0);
        let table = impute_pseudolabels(&model, &data).unwrap();
        let samples = [0, 2, 3, 5];
        let lg = cst_loss(&model, &data, &table, &samples, Mode::Eval, &mut Prng::new(0)).unwrap();
        let numeric = numeric_param_grad(&model, |m| {
            cst_loss(m, &data, &table, &samples, Mode::Eval, &mut Prng::new(0))
                .unwrap()
                .value
        });
        let e = rel_err(&flat(&lg.grads), &numeric);
        assert!(e < TOL, "case {case}: parameter rel err {e}");

        // input gradient: perturb the joint rows the loss was built from
        let a = data.num_actions;
        let cells: Vec<usize> = samples.iter().flat_map(|&i| std::iter::repeat_n(i, a)).collect();
        let acts: Vec<usize> = samples.iter().flat_map(|_| 0..a).collect();
        let x = joint_inputs(&data.features, &cells, &acts, a);
        let mut t = Matrix::zeros(x.rows(), classes);
        for (r, (&i, &act)) in cells.iter().zip(&acts).enumerate() {
            t.set(r, table.label(i, act), 1.0);
        }
        let numeric = numeric_input_grad(&x, |x| {
            cross_entropy(&model.predict(x).unwrap(), &t, None).unwrap().value * a as f64
        });
        let e = rel_err(lg.input_grads.as_slice(), &numeric);
        assert!(e < TOL, "case {case}: input rel err {e}");
    }
}

#[test]
fn cvat_loss_gradients_at_fixed_perturbation() {
    let mut rng = Prng::new(14);
    for case in 0..20 {
        let d = 1 + rng.index(4);
        let actions = 2 + rng.index(3);
        let model = random_model(&mut rng, d + actions, 0.0);
        let samples = 3;
        let per = actions - 1;
        // counterfactual rows grouped by sample
        let mut clean = Matrix::zeros(samples * per, d + actions);
        for s in 0..samples {
            let x: Vec<f64> = (0..d).map(|_| rng.uniform()).collect();
            for k in 0..per {
                let row = clean.row_mut(s * per + k);
                row[..d].copy_from_slice(&x);
                row[d + k] = 1.0;
            }
        }
        let snapshot = model.predict(&clean).unwrap();
        let z = random_matrix(&mut rng, samples, d);
        let lg = cvat_loss_at(&model, &clean, &snapshot, &z, Mode::Eval, &mut Prng::new(0)).unwrap();
        // the snapshot stays fixed while the live model moves
        let numeric = numeric_param_grad(&model, |m| {
            cvat_loss_at(m, &clean, &snapshot, &z, Mode::Eval, &mut Prng::new(0))
                .unwrap()
                .value
        });
        let e = rel_err(&flat(&lg.grads), &numeric);
        assert!(e < TOL, "case {case}: parameter rel err {e}");
        let numeric = numeric_input_grad(&clean, |x| {
            cvat_loss_at(&model, x, &snapshot, &z, Mode::Eval, &mut Prng::new(0))
                .unwrap()
                .value
        });
        let e = rel_err(lg.input_grads.as_slice(), &numeric);
        assert!(e < TOL, "case {case}: input rel err {e}");
    }
}
