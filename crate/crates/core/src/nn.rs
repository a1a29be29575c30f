//! Small dense networks with hand-written reverse mode and Adam.
//!
//! Batches are rows: an input of shape `batch × in` flows through layers
//! computing `act(X·Wᵀ + b)` with `W` stored `out × in`.

use rand::Rng;
use thiserror::Error;

use crate::linalg::{self, LinalgError, Matrix};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("input width {got} does not match layer width {expected}")]
    Width { expected: usize, got: usize },
    #[error("trace does not match model: {0}")]
    Trace(String),
    #[error("parameter/gradient shape mismatch: {0}")]
    ParamShape(String),
}

pub type Result<T> = std::result::Result<T, NnError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Tanh,
    Sigmoid,
    Relu,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed through the activation's output `y`.
    #[inline]
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
            Activation::Relu => "relu",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "identity" => Activation::Identity,
            "tanh" => Activation::Tanh,
            "sigmoid" => Activation::Sigmoid,
            "relu" => Activation::Relu,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    /// Uniform init in `±sqrt(6 / (fan_in + fan_out))`, zero bias.
    pub fn init<R: Rng>(input: usize, output: usize, activation: Activation, rng: &mut R) -> Self {
        let limit = (6.0 / (input + output) as f64).sqrt();
        let weights = Matrix::from_fn(output, input, |_, _| rng.random_range(-limit..=limit));
        Self {
            weights,
            bias: vec![0.0; output],
            activation,
        }
    }

    pub fn input_width(&self) -> usize {
        self.weights.cols()
    }

    pub fn output_width(&self) -> usize {
        self.weights.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<DenseLayer>,
}

/// Activations recorded by [`Mlp::forward`]: `values[0]` is the input and
/// `values[i + 1]` the output of layer `i`.
#[derive(Debug, Clone)]
pub struct Trace {
    pub values: Vec<Matrix>,
}

impl Trace {
    pub fn output(&self) -> &Matrix {
        self.values.last().expect("trace always holds the input")
    }

    pub fn input(&self) -> &Matrix {
        &self.values[0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<LayerGrad>,
}

impl MlpGrads {
    pub fn zeros_like(model: &Mlp) -> Self {
        MlpGrads {
            layers: model
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weights: Matrix::zeros(l.weights.rows(), l.weights.cols()),
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    pub fn accumulate(&mut self, other: &MlpGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weights.data_mut().iter_mut().zip(b.weights.data()) {
                *x += y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += y;
            }
        }
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.data(), l.bias.as_slice()])
            .collect()
    }

    pub fn is_zero(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| *v == 0.0))
    }
}

impl Mlp {
    /// Builds `widths.len() - 1` layers; `activations[i]` applies to layer `i`.
    pub fn init<R: Rng>(widths: &[usize], activations: &[Activation], rng: &mut R) -> Self {
        assert_eq!(widths.len(), activations.len() + 1);
        let layers = widths
            .windows(2)
            .zip(activations)
            .map(|(w, &act)| DenseLayer::init(w[0], w[1], act, rng))
            .collect();
        Self { layers }
    }

    pub fn input_width(&self) -> usize {
        self.layers.first().map_or(0, DenseLayer::input_width)
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(0, DenseLayer::output_width)
    }

    pub fn forward(&self, x: &Matrix) -> Result<Trace> {
        if x.cols() != self.input_width() {
            return Err(NnError::Width {
                expected: self.input_width(),
                got: x.cols(),
            });
        }
        let mut values = Vec::with_capacity(self.layers.len() + 1);
        values.push(x.clone());
        for layer in &self.layers {
            let prev = values.last().expect("non-empty");
            let mut out = linalg::matmul_nt(prev, &layer.weights)?;
            let width = out.cols();
            for row in out.data_mut().chunks_exact_mut(width) {
                for (v, b) in row.iter_mut().zip(&layer.bias) {
                    *v = layer.activation.apply(*v + b);
                }
            }
            values.push(out);
        }
        Ok(Trace { values })
    }

    /// Forward pass returning only the output.
    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward(x)?.values.pop().expect("non-empty"))
    }

    /// Reverse pass: given `∂L/∂output`, returns parameter gradients and
    /// `∂L/∂input`.
    pub fn backward(&self, trace: &Trace, grad_out: &Matrix) -> Result<(MlpGrads, Matrix)> {
        if trace.values.len() != self.layers.len() + 1 {
            return Err(NnError::Trace(format!(
                "{} recorded activations for {} layers",
                trace.values.len(),
                self.layers.len()
            )));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            let (inp, out) = (&trace.values[i], &trace.values[i + 1]);
            if inp.cols() != layer.input_width()
                || out.cols() != layer.output_width()
                || inp.rows() != out.rows()
            {
                return Err(NnError::Trace(format!("layer {i} shape drift")));
            }
        }
        if grad_out.shape() != trace.output().shape() {
            return Err(NnError::Trace(format!(
                "upstream gradient {:?} vs output {:?}",
                grad_out.shape(),
                trace.output().shape()
            )));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut upstream = grad_out.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let out = &trace.values[i + 1];
            let mut pre = upstream;
            for (g, y) in pre.data_mut().iter_mut().zip(out.data()) {
                *g *= layer.activation.derivative_from_output(*y);
            }
            let weights = linalg::matmul_tn(&pre, &trace.values[i])?;
            let mut bias = vec![0.0; layer.output_width()];
            for row in pre.data().chunks_exact(pre.cols()) {
                for (b, g) in bias.iter_mut().zip(row) {
                    *b += g;
                }
            }
            grads.push(LayerGrad { weights, bias });
            upstream = linalg::matmul(&pre, &layer.weights)?;
        }
        grads.reverse();
        Ok((MlpGrads { layers: grads }, upstream))
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.data(), l.bias.as_slice()])
            .collect()
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weights.data_mut(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.5,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, shapes: &[usize]) -> Self {
        Self {
            config,
            step: 0,
            first_moment: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            second_moment: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One bias-corrected Adam update over a list of parameter groups.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.first_moment.len() {
            return Err(NnError::ParamShape(format!(
                "{} parameter groups, {} gradient groups, {} moment groups",
                params.len(),
                grads.len(),
                self.first_moment.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() || p.len() != self.first_moment[i].len() {
                return Err(NnError::ParamShape(format!(
                    "group {i}: {} parameters, {} gradients, {} moments",
                    p.len(),
                    g.len(),
                    self.first_moment[i].len()
                )));
            }
        }
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step as i32;
        let correction1 = 1.0 - beta1.powi(t);
        let correction2 = 1.0 - beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            for j in 0..p.len() {
                let gj = g[j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let m_hat = m[j] / correction1;
                let v_hat = v[j] / correction2;
                p[j] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

/// `mu + exp(logvar / 2) ⊙ noise`.
pub fn gaussian_reparameterize(mu: &Matrix, logvar: &Matrix, noise: &Matrix) -> Result<Matrix> {
    let std = logvar.map(|v| (0.5 * v).exp());
    Ok(mu.add(&std.hadamard(noise)?)?)
}

/// `½ Σ (exp(logvar) + mu² − 1 − logvar)`, summed over every entry.
pub fn kl_to_standard_normal(mu: &Matrix, logvar: &Matrix) -> Result<f64> {
    if mu.shape() != logvar.shape() {
        return Err(LinalgError::Shape {
            op: "kl_to_standard_normal",
            left: mu.shape(),
            right: logvar.shape(),
        }
        .into());
    }
    Ok(0.5
        * mu
            .data()
            .iter()
            .zip(logvar.data())
            .map(|(m, lv)| lv.exp() + m * m - 1.0 - lv)
            .sum::<f64>())
}

/// Gradients of [`kl_to_standard_normal`] w.r.t. `mu` and `logvar`.
pub fn kl_to_standard_normal_grad(mu: &Matrix, logvar: &Matrix) -> (Matrix, Matrix) {
    (mu.clone(), logvar.map(|lv| 0.5 * (lv.exp() - 1.0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_layer_passes_input_through() {
        let layer = DenseLayer {
            weights: Matrix::identity(3),
            bias: vec![0.0; 3],
            activation: Activation::Identity,
        };
        let mlp = Mlp { layers: vec![layer] };
        let x = Matrix::from_rows(&[[0.5, -1.0, 2.0], [3.0, 0.0, -0.25]]);
        assert_eq!(mlp.predict(&x).unwrap(), x);
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut layer = DenseLayer::init(4, 3, Activation::Sigmoid, &mut rng);
        layer.bias = vec![0.0; 3];
        let mlp = Mlp { layers: vec![layer] };
        let out = mlp.predict(&Matrix::zeros(2, 4)).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn two_layer_forward_matches_hand_computation() {
        let mlp = Mlp {
            layers: vec![
                DenseLayer {
                    weights: Matrix::from_rows(&[[0.5, -1.0], [2.0, 0.25]]),
                    bias: vec![0.1, -0.2],
                    activation: Activation::Tanh,
                },
                DenseLayer {
                    weights: Matrix::from_rows(&[[1.5, -0.5]]),
                    bias: vec![0.3],
                    activation: Activation::Sigmoid,
                },
            ],
        };
        let x = Matrix::from_rows(&[[1.0, 2.0]]);
        // hidden pre-activations: 0.5 - 2 + 0.1 = -1.4 ; 2 + 0.5 - 0.2 = 2.3
        let h0 = (-1.4f64).tanh();
        let h1 = (2.3f64).tanh();
        let pre = 1.5 * h0 - 0.5 * h1 + 0.3;
        let expect = 1.0 / (1.0 + (-pre).exp());
        let got = mlp.predict(&x).unwrap().get(0, 0);
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn backward_identity_layer_by_hand() {
        let w = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        let mlp = Mlp {
            layers: vec![DenseLayer {
                weights: w.clone(),
                bias: vec![0.0, 0.0],
                activation: Activation::Identity,
            }],
        };
        let x = Matrix::from_rows(&[[5.0, 6.0]]);
        let g = Matrix::from_rows(&[[1.0, -1.0]]);
        let trace = mlp.forward(&x).unwrap();
        let (grads, grad_in) = mlp.backward(&trace, &g).unwrap();
        // grad_W = gᵀ x, grad_b = g, grad_in = g W
        assert_eq!(
            grads.layers[0].weights,
            Matrix::from_rows(&[[5.0, 6.0], [-5.0, -6.0]])
        );
        assert_eq!(grads.layers[0].bias, vec![1.0, -1.0]);
        assert_eq!(grad_in, Matrix::from_rows(&[[-2.0, -2.0]]));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mlp = Mlp::init(&[4, 5, 3], &[Activation::Tanh, Activation::Sigmoid], &mut rng);
        let trace = mlp.forward(&Matrix::from_fn(2, 4, |r, c| (r + c) as f64 * 0.1)).unwrap();
        let (grads, grad_in) = mlp.backward(&trace, &Matrix::zeros(2, 3)).unwrap();
        assert!(grads.is_zero());
        assert!(grad_in.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn backward_rejects_stale_trace() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Mlp::init(&[4, 5, 3], &[Activation::Tanh, Activation::Identity], &mut rng);
        let b = Mlp::init(&[4, 6, 3], &[Activation::Tanh, Activation::Identity], &mut rng);
        let trace = a.forward(&Matrix::zeros(1, 4)).unwrap();
        assert!(matches!(
            b.backward(&trace, &Matrix::zeros(1, 3)),
            Err(NnError::Trace(_))
        ));
        assert!(matches!(
            a.forward(&Matrix::zeros(1, 3)),
            Err(NnError::Width { expected: 4, got: 3 })
        ));
    }

    #[test]
    fn adam_zero_gradient_keeps_parameters() {
        let mut state = AdamState::new(AdamConfig::default(), &[2]);
        state.first_moment[0] = vec![1.0, -1.0];
        state.second_moment[0] = vec![4.0, 4.0];
        let mut p = vec![0.5, 0.25];
        let before = p.clone();
        // nonzero moments would move p; so check with fresh moments too
        let mut fresh = AdamState::new(AdamConfig::default(), &[2]);
        fresh.step(&mut [p.as_mut_slice()], &[&[0.0, 0.0]]).unwrap();
        assert_eq!(p, before);
        assert_eq!(fresh.step, 1);

        state.step(&mut [p.as_mut_slice()], &[&[0.0, 0.0]]).unwrap();
        assert_eq!(state.first_moment[0], vec![0.5, -0.5]);
        assert_eq!(state.second_moment[0], vec![4.0 * 0.999, 4.0 * 0.999]);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let cfg = AdamConfig {
            learning_rate: 0.1,
            ..AdamConfig::default()
        };
        let mut state = AdamState::new(cfg, &[1]);
        let mut p = vec![0.0];
        state.step(&mut [p.as_mut_slice()], &[&[1.0]]).unwrap();
        // m̂ = 1, v̂ = 1 → Δ = -0.1 / (1 + 1e-8)
        assert!((p[0] + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn adam_constant_gradient_decreases_monotonically() {
        let mut state = AdamState::new(AdamConfig::default(), &[1]);
        let mut p = vec![1.0];
        let mut last = p[0];
        for _ in 0..100 {
            state.step(&mut [p.as_mut_slice()], &[&[0.3]]).unwrap();
            assert!(p[0] < last);
            last = p[0];
        }
        assert_eq!(state.step, 100);
    }

    #[test]
    fn adam_shape_mismatch() {
        let mut state = AdamState::new(AdamConfig::default(), &[2]);
        let mut p = vec![0.0; 3];
        assert!(state.step(&mut [p.as_mut_slice()], &[&[0.0; 3]]).is_err());
    }

    #[test]
    fn reparameterize_examples() {
        let mu = Matrix::from_rows(&[[0.5, -1.0]]);
        let lv = Matrix::from_rows(&[[0.3, 2.0]]);
        assert_eq!(
            gaussian_reparameterize(&mu, &lv, &Matrix::zeros(1, 2)).unwrap(),
            mu
        );
        let n = Matrix::from_rows(&[[0.25, -2.0]]);
        assert_eq!(
            gaussian_reparameterize(&mu, &Matrix::zeros(1, 2), &n).unwrap(),
            mu.add(&n).unwrap()
        );
        let two = gaussian_reparameterize(
            &Matrix::zeros(1, 1),
            &Matrix::from_rows(&[[4f64.ln()]]),
            &Matrix::from_rows(&[[1.0]]),
        )
        .unwrap();
        assert!((two.get(0, 0) - 2.0).abs() < 1e-15);
        assert!(gaussian_reparameterize(&mu, &lv, &Matrix::zeros(2, 1)).is_err());
    }

    #[test]
    fn kl_examples() {
        assert_eq!(
            kl_to_standard_normal(&Matrix::zeros(2, 3), &Matrix::zeros(2, 3)).unwrap(),
            0.0
        );
        assert_eq!(
            kl_to_standard_normal(&Matrix::from_rows(&[[1.0]]), &Matrix::zeros(1, 1)).unwrap(),
            0.5
        );
    }

    #[test]
    fn kl_grad_matches_finite_differences() {
        let mu = Matrix::from_rows(&[[0.3, -1.2, 0.7]]);
        let lv = Matrix::from_rows(&[[-0.4, 0.9, 0.0]]);
        let (gm, gl) = kl_to_standard_normal_grad(&mu, &lv);
        let h = 1e-5;
        for i in 0..3 {
            let mut p = mu.clone();
            p.data_mut()[i] += h;
            let mut m = mu.clone();
            m.data_mut()[i] -= h;
            let fd = (kl_to_standard_normal(&p, &lv).unwrap() - kl_to_standard_normal(&m, &lv).unwrap())
                / (2.0 * h);
            assert!((fd - gm.data()[i]).abs() < 1e-8);
            let mut p = lv.clone();
            p.data_mut()[i] += h;
            let mut m = lv.clone();
            m.data_mut()[i] -= h;
            let fd = (kl_to_standard_normal(&mu, &p).unwrap() - kl_to_standard_normal(&mu, &m).unwrap())
                / (2.0 * h);
            assert!((fd - gl.data()[i]).abs() < 1e-8);
        }
    }
}
