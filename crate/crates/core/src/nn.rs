//! Dense feed-forward classifier with reverse-mode gradients.
//!
//! Layer `l` computes `z_l = a_{l-1} W_l^T + b_l`. Hidden layers apply
//! LeakyReLU followed by inverted dropout; the last layer emits logits and
//! [`MlpModel::forward`] returns their row-wise softmax.
//!
//! Gradients are available with respect to the parameters and the inputs.
//! The input gradient is what the adversarial perturbation search consumes.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{check_dim, Error, Result};
use crate::loss::softmax_rows;
use crate::matrix::{gemm, Matrix, Op};
use crate::rng::Prng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    /// Negative-side slope of LeakyReLU.
    pub leaky_slope: f64,
    /// Dropout probability.
    pub dropout_p: f64,
    pub dropout_placement: DropoutPlacement,
}

/// Which hidden activations dropout applies to.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DropoutPlacement {
    #[default]
    EveryHidden,
    /// Only the activation feeding the output layer.
    LastHidden,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            leaky_slope: 0.01,
            dropout_p: 0.2,
            dropout_placement: DropoutPlacement::EveryHidden,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One affine layer. `weights` is `(out, in)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    fn zeros(input: usize, output: usize) -> Self {
        Dense {
            weights: Matrix::zeros(output, input),
            bias: vec![0.0; output],
        }
    }
}

#[derive(Clone, Debug)]
pub struct MlpModel {
    layers: Vec<Dense>,
    config: ModelConfig,
    /// Bumped on every parameter mutation so stale traces can be detected.
    generation: u64,
}

// Equality is on parameters and config; the generation stamp is bookkeeping.
impl PartialEq for MlpModel {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers && self.config == other.config
    }
}

/// Parameter-shaped gradient buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Dense>,
}

impl Gradients {
    pub fn zeros_like(model: &MlpModel) -> Self {
        Gradients {
            layers: model
                .layers
                .iter()
                .map(|l| Dense::zeros(l.weights.cols(), l.weights.rows()))
                .collect(),
        }
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weights.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    /// `self += factor * other`.
    pub fn add_scaled(&mut self, other: &Gradients, factor: f64) {
        for (a, b) in self.slices_mut().into_iter().zip(other.slices()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += factor * y;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    pub fn max_abs(&self) -> f64 {
        self.slices()
            .iter()
            .flat_map(|s| s.iter())
            .fold(0.0, |m, v| if v.abs() > m { v.abs() } else { m })
    }
}

/// Everything [`MlpModel::backward`] needs from a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    mode: Mode,
    generation: u64,
    layer_dims: Vec<usize>,
    inputs: Matrix,
    /// Pre-activation of every layer; the last entry holds the logits.
    pre: Vec<Matrix>,
    /// Post-activation, post-dropout output of every hidden layer.
    post: Vec<Matrix>,
    /// Inverted-dropout scale factors per hidden layer; `None` means all ones.
    masks: Vec<Option<Matrix>>,
}

impl ForwardTrace {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn logits(&self) -> &Matrix {
        self.pre.last().expect("model has at least one layer")
    }

    /// Pre-activation of layer `layer` (0-based).
    pub fn pre_activation(&self, layer: usize) -> &Matrix {
        &self.pre[layer]
    }

    /// Dropout scale applied at hidden layer `layer`, row `r`, unit `c`.
    pub fn mask_value(&self, layer: usize, r: usize, c: usize) -> f64 {
        match &self.masks[layer] {
            Some(m) => m.get(r, c),
            None => 1.0,
        }
    }

    pub fn batch_rows(&self) -> usize {
        self.inputs.rows()
    }
}

#[inline]
fn leaky(z: f64, slope: f64) -> f64 {
    if z > 0.0 {
        z
    } else {
        slope * z
    }
}

#[inline]
fn leaky_grad(z: f64, slope: f64) -> f64 {
    if z > 0.0 {
        1.0
    } else {
        slope
    }
}

impl MlpModel {
    /// Randomly initialized model with He-uniform weights and zero biases.
    /// `dims` lists every layer width from input to output.
    pub fn new(dims: &[usize], config: ModelConfig, rng: &mut Prng) -> Result<Self> {
        let mut model = MlpModel::zeros(dims, config)?;
        for layer in &mut model.layers {
            let fan_in = layer.weights.cols() as f64;
            let bound = libm::sqrt(6.0 / fan_in);
            for w in layer.weights.as_mut_slice() {
                *w = rng.uniform_range(-bound, bound);
            }
        }
        Ok(model)
    }

    /// Model whose every parameter is zero; it predicts the uniform
    /// distribution for every input.
    pub fn zeros(dims: &[usize], config: ModelConfig) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::InvalidConfig(
                "a model needs at least an input and an output dimension".into(),
            ));
        }
        if dims.contains(&0) {
            return Err(Error::InvalidConfig("layer dimensions must be positive".into()));
        }
        if !(0.0..1.0).contains(&config.dropout_p) {
            return Err(Error::InvalidConfig("dropout_p must lie in [0, 1)".into()));
        }
        let layers = dims.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect();
        Ok(MlpModel {
            layers,
            config,
            generation: 0,
        })
    }

    /// Rebuilds a model from explicit layers, checking that consecutive
    /// dimensions agree.
    pub fn from_layers(layers: Vec<Dense>, config: ModelConfig) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidConfig("a model needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            check_dim("MlpModel::from_layers", pair[0].weights.rows(), pair[1].weights.cols())?;
        }
        for l in &layers {
            check_dim("MlpModel::from_layers bias", l.weights.rows(), l.bias.len())?;
        }
        let mut model = MlpModel::zeros(&[1, 1], config)?;
        model.layers = layers;
        Ok(model)
    }

    pub fn config(&self) -> ModelConfig {
        self.config
    }

    pub fn set_dropout(&mut self, p: f64) -> Result<()> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidConfig("dropout_p must lie in [0, 1)".into()));
        }
        self.config.dropout_p = p;
        Ok(())
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.layers.len() + 1);
        dims.push(self.input_dim());
        dims.extend(self.layers.iter().map(|l| l.weights.rows()));
        dims
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weights.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.layers[self.layers.len() - 1].weights.rows()
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    /// Mutable access to the layers. Invalidates outstanding traces.
    pub fn layers_mut(&mut self) -> &mut [Dense] {
        self.generation += 1;
        &mut self.layers
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    /// Flat view over all parameters, in the same order as
    /// [`Gradients::slices`]. Invalidates outstanding traces.
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.generation += 1;
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weights.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }

    /// Softmax probabilities for each input row, plus the trace needed for
    /// [`MlpModel::backward`]. `rng` is only drawn from in train mode with
    /// positive dropout.
    pub fn forward(&self, inputs: &Matrix, mode: Mode, rng: &mut Prng) -> Result<(Matrix, ForwardTrace)> {
        check_dim("forward input columns", self.input_dim(), inputs.cols())?;
        let n = inputs.rows();
        let last = self.layers.len() - 1;
        let drop = mode == Mode::Train && self.config.dropout_p > 0.0;
        let keep = 1.0 - self.config.dropout_p;
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post = Vec::with_capacity(last);
        let mut masks = Vec::with_capacity(last);

        for (l, layer) in self.layers.iter().enumerate() {
            let prev = if l == 0 { inputs } else { &post[l - 1] };
            let mut z = Matrix::zeros(n, layer.weights.rows());
            for r in 0..n {
                z.row_mut(r).copy_from_slice(&layer.bias);
            }
            gemm(prev, Op::N, &layer.weights, Op::T, 1.0, &mut z)?;
            if l < last {
                let mut a = z.clone();
                a.as_mut_slice()
                    .iter_mut()
                    .for_each(|v| *v = leaky(*v, self.config.leaky_slope));
                let placed = self.config.dropout_placement == DropoutPlacement::EveryHidden || l + 1 == last;
                if drop && placed {
                    let mut mask = Matrix::zeros(n, a.cols());
                    for (m, v) in mask.as_mut_slice().iter_mut().zip(a.as_mut_slice()) {
                        *m = if rng.uniform() < keep { 1.0 / keep } else { 0.0 };
                        *v *= *m;
                    }
                    masks.push(Some(mask));
                } else {
                    masks.push(None);
                }
                post.push(a);
            }
            pre.push(z);
        }

        let probs = softmax_rows(&pre[last]);
        let trace = ForwardTrace {
            mode,
            generation: self.generation,
            layer_dims: self.layer_dims(),
            inputs: inputs.clone(),
            pre,
            post,
            masks,
        };
        Ok((probs, trace))
    }

    /// Eval-mode probabilities.
    pub fn predict(&self, inputs: &Matrix) -> Result<Matrix> {
        // eval mode never touches the stream
        let mut rng = Prng::new(0);
        Ok(self.forward(inputs, Mode::Eval, &mut rng)?.0)
    }

    /// Parameter and input gradients given the gradient of a scalar loss with
    /// respect to the logits.
    pub fn backward(&self, trace: &ForwardTrace, dloss_dlogits: &Matrix) -> Result<(Gradients, Matrix)> {
        let (g, dx) = self.backward_with(trace, dloss_dlogits, &[], true)?;
        Ok((g, dx.expect("input gradient requested")))
    }

    /// General backward pass.
    ///
    /// `injections` adds extra upstream gradient directly at the
    /// pre-activation of the listed layers (used for losses defined on an
    /// intermediate embedding). The input gradient is only computed when
    /// `want_input_grad` is set.
    pub fn backward_with(
        &self,
        trace: &ForwardTrace,
        dloss_dlogits: &Matrix,
        injections: &[(usize, &Matrix)],
        want_input_grad: bool,
    ) -> Result<(Gradients, Option<Matrix>)> {
        if trace.generation != self.generation || trace.layer_dims != self.layer_dims() {
            return Err(Error::StaleTrace);
        }
        let n = trace.inputs.rows();
        check_dim("backward dlogits rows", n, dloss_dlogits.rows())?;
        check_dim("backward dlogits cols", self.num_classes(), dloss_dlogits.cols())?;
        for &(layer, g) in injections {
            if layer >= self.layers.len() {
                return Err(Error::InvalidConfig("gradient injection layer out of range".into()));
            }
            check_dim("backward injection rows", n, g.rows())?;
            check_dim("backward injection cols", self.layers[layer].weights.rows(), g.cols())?;
        }

        let mut grads = Gradients::zeros_like(self);
        let mut dz = dloss_dlogits.clone();
        let last = self.layers.len() - 1;
        for &(layer, g) in injections {
            if layer == last {
                dz.add_scaled(g, 1.0)?;
            }
        }
        let mut input_grad = None;

        for l in (0..self.layers.len()).rev() {
            let prev = if l == 0 { &trace.inputs } else { &trace.post[l - 1] };
            let layer = &self.layers[l];
            gemm(&dz, Op::T, prev, Op::N, 0.0, &mut grads.layers[l].weights)?;
            grads.layers[l].bias = dz.col_sums();

            if l == 0 {
                if want_input_grad {
                    let mut dx = Matrix::zeros(n, layer.weights.cols());
                    gemm(&dz, Op::N, &layer.weights, Op::N, 0.0, &mut dx)?;
                    input_grad = Some(dx);
                }
                break;
            }

            let mut da = Matrix::zeros(n, layer.weights.cols());
            gemm(&dz, Op::N, &layer.weights, Op::N, 0.0, &mut da)?;
            let z_prev = &trace.pre[l - 1];
            let slope = self.config.leaky_slope;
            match &trace.masks[l - 1] {
                Some(mask) => {
                    for ((d, z), m) in da.as_mut_slice().iter_mut().zip(z_prev.as_slice()).zip(mask.as_slice()) {
                        *d *= m * leaky_grad(*z, slope);
                    }
                }
                None => {
                    for (d, z) in da.as_mut_slice().iter_mut().zip(z_prev.as_slice()) {
                        *d *= leaky_grad(*z, slope);
                    }
                }
            }
            for &(layer, g) in injections {
                if layer == l - 1 {
                    da.add_scaled(g, 1.0)?;
                }
            }
            dz = da;
        }
        Ok((grads, input_grad))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::cross_entropy;

    #[test]
    fn zero_model_predicts_uniform() {
        let model = MlpModel::zeros(&[4, 8, 3], ModelConfig::default()).unwrap();
        let x = Matrix::from_rows(&[[1.0, -2.0, 0.5, 3.0], [0.0, 0.0, 0.0, 0.0]]).unwrap();
        let p = model.predict(&x).unwrap();
        for v in p.as_slice() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn hand_computed_single_hidden_layer() {
        // W1 = [[1, -1], [0.5, 2]], b1 = 0; W2 = [[1, 0], [0, 1]], b2 = 0
        let l1 = Dense {
            weights: Matrix::from_rows(&[[1.0, -1.0], [0.5, 2.0]]).unwrap(),
            bias: vec![0.0, 0.0],
        };
        let l2 = Dense {
            weights: Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap(),
            bias: vec![0.0, 0.0],
        };
        let config = ModelConfig {
            dropout_p: 0.0,
            ..ModelConfig::default()
        };
        let model = MlpModel::from_layers(vec![l1, l2], config).unwrap();
        let x = Matrix::from_rows(&[[1.0, 2.0]]).unwrap();
        // z1 = (1 - 2, 0.5 + 4) = (-1, 4.5); h = (-0.01, 4.5)
        // softmax(-0.01, 4.5): p1 = 1 / (1 + e^{4.51})
        let p = model.predict(&x).unwrap();
        let p0 = 1.0 / (1.0 + libm::exp(4.51));
        assert!((p.get(0, 0) - p0).abs() < 1e-15);
        assert!((p.get(0, 1) - (1.0 - p0)).abs() < 1e-15);
    }

    #[test]
    fn eval_mode_is_deterministic_and_mask_free() {
        let mut rng = Prng::new(3);
        let model = MlpModel::new(
            &[3, 6, 6, 2],
            ModelConfig {
                leaky_slope: 0.01,
                dropout_p: 0.5,
                ..ModelConfig::default()
            },
            &mut rng,
        )
        .unwrap();
        let x = Matrix::from_rows(&[[0.1, 0.2, 0.3], [1.0, -1.0, 0.0]]).unwrap();
        let (a, ta) = model.forward(&x, Mode::Eval, &mut rng).unwrap();
        let (b, _) = model.forward(&x, Mode::Eval, &mut rng).unwrap();
        assert_eq!(a, b);
        for l in 0..2 {
            for r in 0..2 {
                for c in 0..6 {
                    assert_eq!(ta.mask_value(l, r, c), 1.0);
                }
            }
        }
        let mut no_drop = model.clone();
        no_drop.set_dropout(0.0).unwrap();
        let (c, _) = no_drop.forward(&x, Mode::Train, &mut rng).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn train_mode_masks_are_inverted_dropout() {
        let mut rng = Prng::new(5);
        let model = MlpModel::new(
            &[2, 50, 2],
            ModelConfig {
                leaky_slope: 0.01,
                dropout_p: 0.2,
                ..ModelConfig::default()
            },
            &mut rng,
        )
        .unwrap();
        let x = Matrix::from_rows(&[[0.3, 0.7]]).unwrap();
        let (_, trace) = model.forward(&x, Mode::Train, &mut rng).unwrap();
        for c in 0..50 {
            let m = trace.mask_value(0, 0, c);
            assert!(m == 0.0 || (m - 1.25).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_gradients() {
        let mut rng = Prng::new(9);
        let model = MlpModel::new(&[3, 4, 2], ModelConfig::default(), &mut rng).unwrap();
        let x = Matrix::from_rows(&[[1.0, 2.0, 3.0]]).unwrap();
        let (_, trace) = model.forward(&x, Mode::Train, &mut rng).unwrap();
        let (g, dx) = model.backward(&trace, &Matrix::zeros(1, 2)).unwrap();
        assert_eq!(g.max_abs(), 0.0);
        assert!(dx.as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn stale_trace_is_rejected() {
        let mut rng = Prng::new(2);
        let mut model = MlpModel::new(&[2, 3, 2], ModelConfig::default(), &mut rng).unwrap();
        let x = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let (p, trace) = model.forward(&x, Mode::Eval, &mut rng).unwrap();
        let ce = cross_entropy(&p, &Matrix::from_rows(&[[1.0, 0.0]]).unwrap(), None).unwrap();
        model.param_slices_mut()[0][0] += 0.1;
        assert_eq!(model.backward(&trace, &ce.grad).unwrap_err(), Error::StaleTrace);
    }

    #[test]
    fn forward_rejects_wrong_input_width() {
        let model = MlpModel::zeros(&[3, 2], ModelConfig::default()).unwrap();
        let mut rng = Prng::new(0);
        assert!(matches!(
            model.forward(&Matrix::zeros(1, 4), Mode::Eval, &mut rng),
            Err(Error::DimensionMismatch { .. })
        ));
    }
}
