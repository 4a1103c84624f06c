//! Multilayer perceptron with forward evaluation and vector-Jacobian products
//! with respect to both the parameters and the input.
//!
//! Parameters live in one flat vector. The layout is layer by layer, each
//! layer contributing its weight matrix (`out × in`, row-major) followed by
//! its bias (`out`). This layout is what checkpoints store.

use crate::error::{PviError, Result};
use crate::numerics::{gemm_raw, sigmoid, softplus, Matrix, Rng, Trans};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    /// `x` for `x ≥ 0`, `slope·x` otherwise.
    LeakyRelu(f64),
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::LeakyRelu(s) => {
                if x >= 0.0 {
                    x
                } else {
                    s * x
                }
            }
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    /// Right derivative at the kink.
    #[inline]
    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::LeakyRelu(s) => {
                if x >= 0.0 {
                    1.0
                } else {
                    s
                }
            }
            Activation::Relu => {
                if x >= 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OutputTransform {
    Identity,
    /// `softplus(x) + eps`.
    SoftplusPlusEps(f64),
}

/// Layer sizes `[d_in, h_1, …, d_out]`; the activation follows every layer but
/// the last, whose output goes through the output transform instead.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpSpec {
    sizes: Vec<usize>,
    activation: Activation,
    output: OutputTransform,
}

/// Intermediate values recorded by a batched forward pass.
#[derive(Clone, Debug)]
pub struct MlpTape {
    /// Input to each layer, `n × in_l`.
    inputs: Vec<Matrix>,
    /// Pre-activation output of each layer, `n × out_l`.
    pre: Vec<Matrix>,
}

impl MlpSpec {
    pub fn new(sizes: Vec<usize>, activation: Activation, output: OutputTransform) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(PviError::Config("an MLP needs at least one layer".into()));
        }
        if sizes.iter().any(|&s| s == 0) {
            return Err(PviError::Config("MLP layer sizes must be positive".into()));
        }
        if let Activation::LeakyRelu(s) = activation {
            if !(s > 0.0 && s < 1.0) {
                return Err(PviError::Config(format!("leaky ReLU slope {s} outside (0, 1)")));
            }
        }
        if let OutputTransform::SoftplusPlusEps(e) = output {
            if !(e >= 0.0) {
                return Err(PviError::Config(format!("softplus floor {e} must be non-negative")));
            }
        }
        Ok(Self { sizes, activation, output })
    }

    /// `NN(d_in, d_h, d_out)`: two hidden layers of width `d_h` with leaky
    /// ReLU (slope 0.01) and a linear output layer.
    pub fn nn(d_in: usize, d_h: usize, d_out: usize) -> Result<Self> {
        Self::new(vec![d_in, d_h, d_h, d_out], Activation::LeakyRelu(0.01), OutputTransform::Identity)
    }

    /// A single affine layer.
    pub fn linear(d_in: usize, d_out: usize) -> Result<Self> {
        Self::new(vec![d_in, d_out], Activation::Identity, OutputTransform::Identity)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn output_transform(&self) -> OutputTransform {
        self.output
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("at least two sizes")
    }

    pub fn num_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn num_params(&self) -> usize {
        self.sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Offsets of the weight and bias blocks of layer `l` in the flat vector.
    fn layer_offsets(&self, l: usize) -> (usize, usize) {
        let w: usize = self.sizes[..=l].windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        (w, w + self.sizes[l] * self.sizes[l + 1])
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init_params(&self, rng: &mut Rng) -> Vec<f64> {
        let mut theta = vec![0.0; self.num_params()];
        for l in 0..self.num_layers() {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let (w, b) = self.layer_offsets(l);
            for v in &mut theta[w..b] {
                *v = bound * (2.0 * rng.uniform() - 1.0);
            }
        }
        theta
    }

    fn check_params(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.num_params() {
            return Err(PviError::dim(format!(
                "MLP expects {} parameters, got {}",
                self.num_params(),
                theta.len()
            )));
        }
        Ok(())
    }

    /// Forward pass over the rows of `x` (`n × d_in`).
    pub fn forward_batch(&self, theta: &[f64], x: &Matrix) -> Result<(Matrix, MlpTape)> {
        self.check_params(theta)?;
        if x.cols() != self.input_dim() {
            return Err(PviError::dim(format!(
                "MLP input has {} columns, expected {}",
                x.cols(),
                self.input_dim()
            )));
        }
        let n = x.rows();
        let mut inputs = Vec::with_capacity(self.num_layers());
        let mut pre = Vec::with_capacity(self.num_layers());
        let mut current = x.clone();
        for l in 0..self.num_layers() {
            let (din, dout) = (self.sizes[l], self.sizes[l + 1]);
            let (w, b) = self.layer_offsets(l);
            let mut z = Matrix::zeros(n, dout);
            for i in 0..n {
                z.row_mut(i).copy_from_slice(&theta[b..b + dout]);
            }
            gemm_raw(
                1.0,
                (current.as_slice(), n, din),
                Trans::No,
                (&theta[w..b], dout, din),
                Trans::Yes,
                1.0,
                (z.as_mut_slice(), n, dout),
            );
            let last = l + 1 == self.num_layers();
            let mut a = z.clone();
            if last {
                if let OutputTransform::SoftplusPlusEps(eps) = self.output {
                    for v in a.as_mut_slice() {
                        *v = softplus(*v) + eps;
                    }
                }
            } else if self.activation != Activation::Identity {
                for v in a.as_mut_slice() {
                    *v = self.activation.apply(*v);
                }
            }
            inputs.push(current);
            pre.push(z);
            current = a;
        }
        Ok((current, MlpTape { inputs, pre }))
    }

    /// Reverse pass for the cotangent `cot` (`n × d_out`). Adds the parameter
    /// gradient summed over the batch into `grad_theta` when given, and
    /// returns the per-row input gradients when `want_input` is set.
    pub fn backward_batch(
        &self,
        theta: &[f64],
        tape: &MlpTape,
        cot: &Matrix,
        mut grad_theta: Option<&mut [f64]>,
        want_input: bool,
    ) -> Result<Option<Matrix>> {
        self.check_params(theta)?;
        let n = tape.inputs[0].rows();
        if cot.rows() != n || cot.cols() != self.output_dim() {
            return Err(PviError::dim(format!(
                "cotangent is {}x{}, expected {}x{}",
                cot.rows(),
                cot.cols(),
                n,
                self.output_dim()
            )));
        }
        if let Some(g) = grad_theta.as_deref() {
            self.check_params(g)?;
        }
        let mut delta = cot.clone();
        if let OutputTransform::SoftplusPlusEps(_) = self.output {
            let pre = &tape.pre[self.num_layers() - 1];
            for (d, &z) in delta.as_mut_slice().iter_mut().zip(pre.as_slice()) {
                *d *= sigmoid(z);
            }
        }
        for l in (0..self.num_layers()).rev() {
            let (din, dout) = (self.sizes[l], self.sizes[l + 1]);
            let (w, b) = self.layer_offsets(l);
            if let Some(g) = grad_theta.as_deref_mut() {
                gemm_raw(
                    1.0,
                    (delta.as_slice(), n, dout),
                    Trans::Yes,
                    (tape.inputs[l].as_slice(), n, din),
                    Trans::No,
                    1.0,
                    (&mut g[w..b], dout, din),
                );
                let gb = &mut g[b..b + dout];
                for row in delta.row_iter() {
                    for (gj, dj) in gb.iter_mut().zip(row) {
                        *gj += dj;
                    }
                }
            }
            if l == 0 && !want_input {
                break;
            }
            let mut prev = Matrix::zeros(n, din);
            gemm_raw(
                1.0,
                (delta.as_slice(), n, dout),
                Trans::No,
                (&theta[w..b], dout, din),
                Trans::No,
                0.0,
                (prev.as_mut_slice(), n, din),
            );
            if l > 0 && self.activation != Activation::Identity {
                let pre = &tape.pre[l - 1];
                for (d, &z) in prev.as_mut_slice().iter_mut().zip(pre.as_slice()) {
                    *d *= self.activation.derivative(z);
                }
            }
            delta = prev;
        }
        Ok(if want_input { Some(delta) } else { None })
    }

    fn single_row(&self, x: &[f64], expected: usize, what: &str) -> Result<Matrix> {
        if x.len() != expected {
            return Err(PviError::dim(format!("{what} has length {}, expected {expected}", x.len())));
        }
        Matrix::from_vec(1, expected, x.to_vec())
    }

    pub fn forward(&self, theta: &[f64], input: &[f64]) -> Result<Vec<f64>> {
        let x = self.single_row(input, self.input_dim(), "MLP input")?;
        Ok(self.forward_batch(theta, &x)?.0.into_vec())
    }

    /// `(∇_θ f)·v` with `(∇_θ f)_ij = ∂_θi f_j`.
    pub fn vjp_params(&self, theta: &[f64], input: &[f64], cotangent: &[f64]) -> Result<Vec<f64>> {
        let x = self.single_row(input, self.input_dim(), "MLP input")?;
        let v = self.single_row(cotangent, self.output_dim(), "cotangent")?;
        let (_, tape) = self.forward_batch(theta, &x)?;
        let mut g = vec![0.0; self.num_params()];
        self.backward_batch(theta, &tape, &v, Some(&mut g), false)?;
        Ok(g)
    }

    /// `(∇_x f)·v`.
    pub fn vjp_input(&self, theta: &[f64], input: &[f64], cotangent: &[f64]) -> Result<Vec<f64>> {
        let x = self.single_row(input, self.input_dim(), "MLP input")?;
        let v = self.single_row(cotangent, self.output_dim(), "cotangent")?;
        let (_, tape) = self.forward_batch(theta, &x)?;
        let g = self.backward_batch(theta, &tape, &v, None, true)?;
        Ok(g.expect("input gradient requested").into_vec())
    }

    /// Smallest pre-activation magnitude over the hidden layers at `input`,
    /// used by gradient checks to stay away from activation kinks.
    pub fn min_hidden_preactivation(&self, theta: &[f64], input: &[f64]) -> Result<f64> {
        let x = self.single_row(input, self.input_dim(), "MLP input")?;
        let (_, tape) = self.forward_batch(theta, &x)?;
        Ok(tape.pre[..self.num_layers() - 1]
            .iter()
            .flat_map(|m| m.as_slice().iter().map(|v| v.abs()))
            .fold(f64::INFINITY, f64::min))
    }
}

/// Structured view of the parameters of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    /// `out × in`.
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

/// Structured parameters; bijective with the flat vector.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<LayerParams>,
}

impl MlpParams {
    pub fn unflatten(spec: &MlpSpec, theta: &[f64]) -> Result<Self> {
        spec.check_params(theta)?;
        let layers = (0..spec.num_layers())
            .map(|l| {
                let (din, dout) = (spec.sizes[l], spec.sizes[l + 1]);
                let (w, b) = spec.layer_offsets(l);
                LayerParams {
                    weights: Matrix::from_vec(dout, din, theta[w..b].to_vec()).expect("sized above"),
                    bias: theta[b..b + dout].to_vec(),
                }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for layer in &self.layers {
            out.extend_from_slice(layer.weights.as_slice());
            out.extend_from_slice(&layer.bias);
        }
        out
    }
}
