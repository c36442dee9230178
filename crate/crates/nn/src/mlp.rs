use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use crate::error::{NnError, Result};
use crate::tape::{Grads, Tape, Var};

/// `tanh(softplus(x))` and the logistic sigmoid from a single `exp`:
/// with `e = exp(x)`, `tanh(ln(1 + e)) = e(e + 2) / (e(e + 2) + 2)`.
#[inline]
fn tanh_softplus_and_sigmoid(x: f64) -> (f64, f64) {
    if x > 20.0 {
        return (1.0, 1.0);
    }
    let e = x.exp();
    let n = e * (e + 2.0);
    (n / (n + 2.0), e / (1.0 + e))
}

/// `x * tanh(softplus(x))`
#[inline]
pub fn mish(x: f64) -> f64 {
    x * tanh_softplus_and_sigmoid(x).0
}

#[inline]
pub fn mish_derivative(x: f64) -> f64 {
    mish_with_derivative(x).1
}

/// `(mish(x), mish'(x))` sharing one `exp`.
#[inline]
pub fn mish_with_derivative(x: f64) -> (f64, f64) {
    let (t, sig) = tanh_softplus_and_sigmoid(x);
    (x * t, t + x * (1.0 - t * t) * sig)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Mish,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Mish => mish(x),
            Activation::Identity => x,
        }
    }
}

/// Dense layer computing `W x + b`, with `W` stored `[out x in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    /// Uniform fan-in initialization: weights in `±1/sqrt(in)`, zero bias.
    pub fn init<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (input.max(1) as f64).sqrt();
        let weight = Array2::from_shape_fn((output, input), |_| rng.gen_range(-bound..=bound));
        Linear { weight, bias: Array1::zeros(output) }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Linear { weight: Array2::zeros((output, input)), bias: Array1::zeros(output) }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    /// Batched `x W^T + b`.
    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut out = x.dot(&self.weight.t());
        out += &self.bias;
        out
    }

    /// Weight followed by bias as two contiguous slices.
    pub fn slices(&self) -> [&[f64]; 2] {
        [
            self.weight.as_slice().expect("weights are contiguous"),
            self.bias.as_slice().expect("bias is contiguous"),
        ]
    }

    pub fn slices_mut(&mut self) -> [&mut [f64]; 2] {
        [
            self.weight.as_slice_mut().expect("weights are contiguous"),
            self.bias.as_slice_mut().expect("bias is contiguous"),
        ]
    }
}

/// Anything made of an ordered list of dense layers. Optimizers, EMA and the
/// parameter file format operate through this view.
pub trait ParamSet {
    fn linears(&self) -> Vec<&Linear>;
    fn linears_mut(&mut self) -> Vec<&mut Linear>;

    fn num_params(&self) -> usize {
        self.linears().iter().map(|l| l.num_params()).sum()
    }

    fn zeros_like(&self) -> Gradients {
        Gradients { layers: self.linears().iter().map(|l| Linear::zeros(l.input_dim(), l.output_dim())).collect() }
    }

    fn is_congruent<P: ParamSet + ?Sized>(&self, other: &P) -> bool {
        let (a, b) = (self.linears(), other.linears());
        a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.weight.dim() == y.weight.dim())
    }

    /// All parameters, layer by layer (weights then bias).
    fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in self.linears() {
            for s in l.slices() {
                out.extend_from_slice(s);
            }
        }
        out
    }

    /// Adds `delta` to the parameter at `index` of the [`ParamSet::to_flat`]
    /// ordering. Returns false when the index is out of range.
    fn add_at(&mut self, index: usize, delta: f64) -> bool {
        let mut idx = index;
        for l in self.linears_mut() {
            for s in l.slices_mut() {
                if idx < s.len() {
                    s[idx] += delta;
                    return true;
                }
                idx -= s.len();
            }
        }
        false
    }
}

/// Gradient record, shaped like the parameter set it differentiates.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Linear>,
}

impl ParamSet for Gradients {
    fn linears(&self) -> Vec<&Linear> {
        self.layers.iter().collect()
    }
    fn linears_mut(&mut self) -> Vec<&mut Linear> {
        self.layers.iter_mut().collect()
    }
}

impl Gradients {
    pub fn scaled(mut self, c: f64) -> Self {
        for l in &mut self.layers {
            l.weight *= c;
            l.bias *= c;
        }
        self
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight += &b.weight;
            a.bias += &b.bias;
        }
    }
}

/// Multilayer perceptron: hidden layers use `activation`, the output layer is
/// linear.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl ParamSet for MlpParams {
    fn linears(&self) -> Vec<&Linear> {
        self.layers.iter().collect()
    }
    fn linears_mut(&mut self) -> Vec<&mut Linear> {
        self.layers.iter_mut().collect()
    }
}

impl MlpParams {
    pub const DEFAULT_HIDDEN: usize = 256;
    pub const DEFAULT_DEPTH: usize = 3;

    /// `depth` hidden layers of width `hidden`, Mish activations.
    pub fn new<R: Rng + ?Sized>(input: usize, hidden: usize, depth: usize, output: usize, rng: &mut R) -> Self {
        let mut layers = Vec::with_capacity(depth + 1);
        let mut prev = input;
        for _ in 0..depth {
            layers.push(Linear::init(prev, hidden, rng));
            prev = hidden;
        }
        layers.push(Linear::init(prev, output, rng));
        MlpParams { layers, activation: Activation::Mish }
    }

    pub fn from_layers(layers: Vec<Linear>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(NnError::shape("mlp", "at least one layer", 0));
        }
        for pair in layers.windows(2) {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(NnError::shape("mlp", pair[0].output_dim(), pair[1].input_dim()));
            }
        }
        for l in &layers {
            if l.bias.len() != l.output_dim() {
                return Err(NnError::shape("mlp bias", l.output_dim(), l.bias.len()));
            }
        }
        Ok(MlpParams { layers, activation })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    /// Width of the first hidden layer (the output width for a single-layer net).
    pub fn hidden_dim(&self) -> usize {
        self.layers[0].output_dim()
    }

    /// Batched forward pass without recording a tape.
    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.input_dim() {
            return Err(NnError::shape("mlp_forward", self.input_dim(), x.ncols()));
        }
        let last = self.layers.len() - 1;
        let mut h = self.layers[0].forward_batch(x);
        if last > 0 {
            h.mapv_inplace(|v| self.activation.apply(v));
        }
        for (i, l) in self.layers.iter().enumerate().skip(1) {
            h = l.forward_batch(h.view());
            if i < last {
                h.mapv_inplace(|v| self.activation.apply(v));
            }
        }
        Ok(h)
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<BoundLinear> {
        bind_params(tape, self, trainable)
    }

    /// Forward pass recorded on `tape` using previously bound layers.
    pub fn forward_tape(&self, tape: &mut Tape, bound: &[BoundLinear], x: Var) -> Result<Var> {
        let last = bound.len() - 1;
        let mut h = x;
        for (i, l) in bound.iter().enumerate() {
            h = tape.affine(h, l.weight, l.bias)?;
            if i < last && self.activation == Activation::Mish {
                h = tape.mish(h);
            }
        }
        Ok(h)
    }
}

/// Single-sample convenience wrapper around [`MlpParams::forward_batch`].
pub fn mlp_forward(params: &MlpParams, input: &[f64]) -> Result<Vec<f64>> {
    let x = ArrayView2::from_shape((1, input.len()), input).expect("row view");
    Ok(params.forward_batch(x)?.into_raw_vec_and_offset().0)
}

/// Tape handles for one dense layer.
#[derive(Debug, Clone, Copy)]
pub struct BoundLinear {
    pub weight: Var,
    pub bias: Var,
}

/// Places every layer of `params` on the tape, as trainable leaves or constants.
pub fn bind_params<P: ParamSet + ?Sized>(tape: &mut Tape, params: &P, trainable: bool) -> Vec<BoundLinear> {
    params
        .linears()
        .into_iter()
        .map(|l| {
            let w = l.weight.clone();
            let b = l.bias.clone().insert_axis(Axis(0));
            if trainable {
                BoundLinear { weight: tape.leaf(w), bias: tape.leaf(b) }
            } else {
                BoundLinear { weight: tape.constant(w), bias: tape.constant(b) }
            }
        })
        .collect()
}

/// Pulls per-layer gradients for `bound` out of a backward pass. Layers that
/// received no gradient get zeros.
pub fn collect_gradients(grads: &mut Grads, bound: &[BoundLinear], like: &impl ParamSet) -> Gradients {
    let layers = bound
        .iter()
        .zip(like.linears())
        .map(|(b, l)| {
            let weight = grads
                .take(b.weight)
                .map(standard_layout)
                .unwrap_or_else(|| Array2::zeros(l.weight.dim()));
            let bias = grads
                .take(b.bias)
                .map(|g| g.index_axis_move(Axis(0), 0).as_standard_layout().into_owned())
                .unwrap_or_else(|| Array1::zeros(l.bias.len()));
            Linear { weight, bias }
        })
        .collect();
    Gradients { layers }
}

fn standard_layout(a: Array2<f64>) -> Array2<f64> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

/// Differentiates a scalar loss built on a fresh tape with respect to every
/// parameter of `params`. Returns the loss value and its gradients.
pub fn grad<P, F>(params: &P, loss: F) -> Result<(f64, Gradients)>
where
    P: ParamSet,
    F: FnOnce(&mut Tape, &[BoundLinear]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = bind_params(&mut tape, params, true);
    let out = loss(&mut tape, &bound)?;
    let value = tape.scalar_value(out);
    let mut g = tape.backward(out)?;
    Ok((value, collect_gradients(&mut g, &bound, params)))
}
