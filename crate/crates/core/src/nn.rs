//! Dense MLP substrate: forward/backward passes, RMSprop updates, and
//! weight clipping for the Lipschitz-constrained critics.
//!
//! Only the fixed feed-forward compositions the model needs are supported;
//! there is no general autodiff graph. `backward` consumes the [`Tape`]
//! produced by the matching `forward`, and tapes are invalidated by any
//! parameter update.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{Matrix, Real};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Relu,
    /// Leaky ReLU with the given negative-side slope.
    LeakyRelu(Real),
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, x: Real) -> Real {
        match self {
            Activation::Identity => x,
            Activation::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu(slope) => {
                if x > 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative as a function of the pre-activation. Kinks take the
    /// zero-side subgradient.
    #[inline]
    fn derivative(self, x: Real) -> Real {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu(slope) => {
                if x > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
        }
    }
}

/// One dense layer: `y = activation(x * W^T + b)` with `W` stored `out x in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: Vec<Real>,
    pub activation: Activation,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }
}

/// Fully connected network with a consistent layer chain.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<Layer>,
    /// Bumped on every parameter mutation; stale tapes are rejected.
    version: u64,
}

/// Equality is parameter equality; the tape-invalidation counter is
/// bookkeeping, not identity.
impl PartialEq for Mlp {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

/// Cached forward-pass state consumed by [`Mlp::backward`].
#[derive(Debug, Clone)]
pub struct Tape {
    version: u64,
    input: Matrix,
    pre: Vec<Matrix>,
    post: Vec<Matrix>,
}

/// Per-layer gradient of a scalar loss with respect to one layer's parameters.
#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub weight: Matrix,
    pub bias: Vec<Real>,
}

/// Gradients for every parameter of an [`Mlp`], in layer order.
#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub layers: Vec<LayerGrads>,
}

impl MlpGrads {
    pub fn zeros_like(net: &Mlp) -> Self {
        MlpGrads {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGrads {
                    weight: Matrix::zeros(l.out_dim(), l.in_dim()),
                    bias: vec![0.0; l.out_dim()],
                })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &MlpGrads) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::shape("MlpGrads::add_assign", self.layers.len(), other.layers.len()));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight.add_assign(&b.weight)?;
            if a.bias.len() != b.bias.len() {
                return Err(Error::shape("MlpGrads::add_assign bias", a.bias.len(), b.bias.len()));
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += y;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: Real) {
        for l in &mut self.layers {
            l.weight.scale(factor);
            for b in &mut l.bias {
                *b *= factor;
            }
        }
    }

    /// Parameter slices in the same order as [`ParamSet::params`] on the net.
    pub fn slices(&self) -> Vec<&[Real]> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for l in &self.layers {
            out.push(l.weight.data());
            out.push(l.bias.as_slice());
        }
        out
    }
}

/// Anything with a flat, ordered view of its trainable parameters.
pub trait ParamSet {
    fn params(&self) -> Vec<&[Real]>;
    fn params_mut(&mut self) -> Vec<&mut [Real]>;
}

impl Mlp {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Validation("Mlp needs at least one layer".into()));
        }
        for (k, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.out_dim() {
                return Err(Error::shape(format!("layer {k} bias"), layer.out_dim(), layer.bias.len()));
            }
            if k > 0 && layer.in_dim() != layers[k - 1].out_dim() {
                return Err(Error::shape(
                    format!("layer {k} input"),
                    layers[k - 1].out_dim(),
                    layer.in_dim(),
                ));
            }
        }
        Ok(Mlp { layers, version: 0 })
    }

    /// Glorot-uniform initialisation: weights in `[-a, a]` with
    /// `a = sqrt(6 / (fan_in + fan_out))`, biases zero. `dims` chains
    /// input through hidden sizes to the output; hidden layers use
    /// `hidden`, the last layer `output`.
    pub fn glorot<R: Rng>(
        dims: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Validation("Mlp::glorot needs input and output dims".into()));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Validation("Mlp dims must be positive".into()));
        }
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for k in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[k], dims[k + 1]);
            let a = (6.0 / (fan_in + fan_out) as Real).sqrt();
            let data = (0..fan_in * fan_out).map(|_| rng.random_range(-a..a)).collect();
            layers.push(Layer {
                weight: Matrix::from_vec(fan_out, fan_in, data)?,
                bias: vec![0.0; fan_out],
                activation: if k + 2 == dims.len() { output } else { hidden },
            });
        }
        Mlp::new(layers)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Re-checks the structural invariants; deserialized networks bypass
    /// the checked constructor.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Validation("Mlp has no layers".into()));
        }
        for (k, layer) in self.layers.iter().enumerate() {
            layer.weight.validate()?;
            if layer.bias.len() != layer.out_dim() {
                return Err(Error::shape(format!("layer {k} bias"), layer.out_dim(), layer.bias.len()));
            }
            if !layer.bias.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!("layer {k} bias")));
            }
            if k > 0 && layer.in_dim() != self.layers[k - 1].out_dim() {
                return Err(Error::shape(
                    format!("layer {k} input"),
                    self.layers[k - 1].out_dim(),
                    layer.in_dim(),
                ));
            }
        }
        Ok(())
    }

    fn check_input(&self, batch: &Matrix, context: &str) -> Result<()> {
        if batch.cols() != self.input_dim() {
            return Err(Error::shape(context, self.input_dim(), batch.cols()));
        }
        if !batch.is_finite() {
            return Err(Error::NonFinite(format!("{context} input")));
        }
        Ok(())
    }

    /// Forward pass without a tape, for inference-only paths.
    pub fn infer(&self, batch: &Matrix) -> Result<Matrix> {
        self.check_input(batch, "Mlp::infer")?;
        let mut current = batch.clone();
        for layer in &self.layers {
            let mut z = current.matmul_transpose_b(&layer.weight)?;
            for i in 0..z.rows() {
                for (v, b) in z.row_mut(i).iter_mut().zip(&layer.bias) {
                    *v = layer.activation.apply(*v + b);
                }
            }
            current = z;
        }
        Ok(current)
    }

    /// Forward pass over a `b x in` batch, returning the `b x out` output
    /// and the tape that `backward` needs.
    pub fn forward(&self, batch: &Matrix) -> Result<(Matrix, Tape)> {
        self.check_input(batch, "Mlp::forward")?;
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post = Vec::with_capacity(self.layers.len());
        let mut current = batch.clone();
        for layer in &self.layers {
            let mut z = current.matmul_transpose_b(&layer.weight)?;
            for i in 0..z.rows() {
                for (v, b) in z.row_mut(i).iter_mut().zip(&layer.bias) {
                    *v += b;
                }
            }
            let mut a = z.clone();
            for v in a.data_mut() {
                *v = layer.activation.apply(*v);
            }
            pre.push(z);
            post.push(a.clone());
            current = a;
        }
        let tape = Tape {
            version: self.version,
            input: batch.clone(),
            pre,
            post,
        };
        Ok((current, tape))
    }

    /// Backpropagates `grad_output` (dL/d output, `b x out`) through the
    /// tape, returning parameter gradients and dL/d input (`b x in`).
    pub fn backward(&self, tape: &Tape, grad_output: &Matrix) -> Result<(MlpGrads, Matrix)> {
        if tape.version != self.version {
            return Err(Error::Contract(
                "tape is stale: the network was updated after the forward pass".into(),
            ));
        }
        let last = tape.post.last().ok_or_else(|| Error::Contract("empty tape".into()))?;
        if grad_output.rows() != last.rows() || grad_output.cols() != last.cols() {
            return Err(Error::shape(
                "Mlp::backward grad_output",
                format!("{}x{}", last.rows(), last.cols()),
                format!("{}x{}", grad_output.rows(), grad_output.cols()),
            ));
        }

        let mut grads = Vec::with_capacity(self.layers.len());
        let mut upstream = grad_output.clone();
        for (k, layer) in self.layers.iter().enumerate().rev() {
            // delta = dL/dz = upstream ⊙ act'(z)
            let mut delta = upstream;
            for (d, &z) in delta.data_mut().iter_mut().zip(tape.pre[k].data()) {
                *d *= layer.activation.derivative(z);
            }
            let layer_input = if k == 0 { &tape.input } else { &tape.post[k - 1] };
            let weight_grad = delta.matmul_transpose_a(layer_input)?;
            let bias_grad = delta.col_sums();
            upstream = delta.matmul(&layer.weight)?;
            grads.push(LayerGrads {
                weight: weight_grad,
                bias: bias_grad,
            });
        }
        grads.reverse();
        Ok((MlpGrads { layers: grads }, upstream))
    }
}

impl ParamSet for Mlp {
    fn params(&self) -> Vec<&[Real]> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for l in &self.layers {
            out.push(l.weight.data());
            out.push(l.bias.as_slice());
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut [Real]> {
        self.version += 1;
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for l in &mut self.layers {
            out.push(l.weight.data_mut());
            out.push(l.bias.as_mut_slice());
        }
        out
    }
}

/// Clamps every weight and bias of `net` into `[-c, c]`.
pub fn clip_weights(net: &mut Mlp, c: Real) -> Result<()> {
    if !(c > 0.0) {
        return Err(Error::Validation(format!("clip bound must be positive, got {c}")));
    }
    for slice in net.params_mut() {
        for v in slice {
            *v = v.clamp(-c, c);
        }
    }
    Ok(())
}

/// RMSprop state: one squared-gradient accumulator per parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmsPropState {
    pub learning_rate: Real,
    pub decay: Real,
    pub epsilon: Real,
    acc: Vec<Vec<Real>>,
}

impl RmsPropState {
    pub fn new(
        learning_rate: Real,
        decay: Real,
        epsilon: Real,
        params: &impl ParamSet,
    ) -> Result<Self> {
        if learning_rate < 0.0 {
            return Err(Error::Validation(format!("learning rate must be >= 0, got {learning_rate}")));
        }
        if !(decay > 0.0 && decay < 1.0) {
            return Err(Error::Validation(format!("decay must be in (0, 1), got {decay}")));
        }
        if !(epsilon > 0.0) {
            return Err(Error::Validation(format!("epsilon must be positive, got {epsilon}")));
        }
        Ok(RmsPropState {
            learning_rate,
            decay,
            epsilon,
            acc: params.params().iter().map(|p| vec![0.0; p.len()]).collect(),
        })
    }

    pub fn accumulators(&self) -> &[Vec<Real>] {
        &self.acc
    }

    /// Checks hyperparameters and accumulator shapes against a parameter
    /// set; deserialized state bypasses the checked constructor.
    pub fn validate(&self, params: &impl ParamSet) -> Result<()> {
        if self.learning_rate < 0.0 || !(self.decay > 0.0 && self.decay < 1.0) || !(self.epsilon > 0.0) {
            return Err(Error::Validation("invalid RMSprop hyperparameters".into()));
        }
        let slots = params.params();
        if slots.len() != self.acc.len() {
            return Err(Error::shape("RmsPropState slots", slots.len(), self.acc.len()));
        }
        for (slot, acc) in slots.iter().zip(&self.acc) {
            if slot.len() != acc.len() {
                return Err(Error::shape("RmsPropState accumulator", slot.len(), acc.len()));
            }
            if !acc.iter().all(|v| v.is_finite() && *v >= 0.0) {
                return Err(Error::Validation("RMSprop accumulator must be finite and non-negative".into()));
            }
        }
        Ok(())
    }

    /// One update: `acc <- decay*acc + (1-decay)*g^2`,
    /// `p <- p - lr * g / (sqrt(acc) + eps)`, elementwise.
    pub fn step(&mut self, params: &mut impl ParamSet, grads: &[&[Real]]) -> Result<()> {
        let mut slots = params.params_mut();
        if slots.len() != grads.len() || slots.len() != self.acc.len() {
            return Err(Error::shape("rmsprop_step slot count", self.acc.len(), grads.len()));
        }
        for ((slot, grad), acc) in slots.iter_mut().zip(grads).zip(&mut self.acc) {
            if slot.len() != grad.len() || slot.len() != acc.len() {
                return Err(Error::shape("rmsprop_step slot size", slot.len(), grad.len()));
            }
            for ((p, &g), a) in slot.iter_mut().zip(*grad).zip(acc) {
                *a = self.decay * *a + (1.0 - self.decay) * g * g;
                *p -= self.learning_rate * g / (a.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}
