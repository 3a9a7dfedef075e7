//! Dense feed-forward networks with exact reverse-mode gradients.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};

/// Slope used for negative inputs of the hidden-layer leaky ReLU.
pub const LEAKY_RELU_ALPHA: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    LeakyRelu { alpha: f64 },
    Tanh,
    Softmax,
    Linear,
}

impl Activation {
    pub fn leaky_relu() -> Self {
        Activation::LeakyRelu {
            alpha: LEAKY_RELU_ALPHA,
        }
    }

    /// Elementwise activations only; softmax is row-wise and handled separately.
    pub fn apply_scalar<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::LeakyRelu { alpha } => {
                if x >= T::zero() {
                    x
                } else {
                    x * lit(alpha)
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Linear => x,
            Activation::Softmax => panic!("softmax is not elementwise"),
        }
    }

    /// Derivative at pre-activation `z`. The leaky-ReLU kink at exactly 0 takes slope `alpha`.
    pub fn derivative_scalar<T: Scalar>(self, z: T) -> T {
        match self {
            Activation::LeakyRelu { alpha } => {
                if z > T::zero() {
                    T::one()
                } else {
                    lit(alpha)
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                T::one() - t * t
            }
            Activation::Linear => T::one(),
            Activation::Softmax => panic!("softmax is not elementwise"),
        }
    }

    fn apply<T: Scalar>(self, z: &Array2<T>) -> Array2<T> {
        match self {
            Activation::Softmax => softmax_rows(z),
            act => z.mapv(|v| act.apply_scalar(v)),
        }
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Scalar>(z: &Array2<T>) -> Array2<T> {
    let mut out = z.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum: T = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// One fully connected layer: `act(x Wᵀ + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
    pub activation: Activation,
}

impl<T: Scalar> Dense<T> {
    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    layers: Vec<Dense<T>>,
}

/// Everything `backward` needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    pub input: Array2<T>,
    pub pre_activations: Vec<Array2<T>>,
    pub activations: Vec<Array2<T>>,
}

impl<T: Scalar> ForwardCache<T> {
    pub fn output(&self) -> &Array2<T> {
        self.activations.last().expect("cache of a non-empty network")
    }
}

/// Partial derivatives of a scalar loss, shaped like the owning network.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub layers: Vec<(Array2<T>, Array1<T>)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(net: &Mlp<T>) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| (Array2::zeros(l.weight.raw_dim()), Array1::zeros(l.bias.raw_dim())))
                .collect(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|(w, b)| w.len() + b.len()).sum()
    }

    pub fn add_assign(&mut self, other: &Gradients<T>) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::Shape("gradient shapes differ".into()));
        }
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            *w += ow;
            *b += ob;
        }
        Ok(())
    }

    pub fn values(&self) -> impl Iterator<Item = T> + '_ {
        self.layers
            .iter()
            .flat_map(|(w, b)| w.iter().chain(b.iter()).copied())
    }

    pub fn get(&self, index: usize) -> T {
        let mut rest = index;
        for (w, b) in &self.layers {
            if rest < w.len() {
                return w[[rest / w.ncols(), rest % w.ncols()]];
            }
            rest -= w.len();
            if rest < b.len() {
                return b[rest];
            }
            rest -= b.len();
        }
        panic!("gradient index {index} out of range")
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &Gradients<T>) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|((w, b), (ow, ob))| w.dim() == ow.dim() && b.dim() == ob.dim())
    }

    pub(crate) fn congruent_with(&self, net: &Mlp<T>) -> bool {
        self.layers.len() == net.layers.len()
            && self
                .layers
                .iter()
                .zip(&net.layers)
                .all(|((w, b), l)| w.dim() == l.weight.dim() && b.dim() == l.bias.dim())
    }
}

impl<T: Scalar> Mlp<T> {
    /// Builds a network from explicit layers, checking the structural invariants.
    pub fn from_layers(layers: Vec<Dense<T>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape("network needs at least one layer".into()));
        }
        for (k, pair) in layers.windows(2).enumerate() {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::Shape(format!(
                    "layer {k} outputs {} but layer {} expects {}",
                    pair[0].output_dim(),
                    k + 1,
                    pair[1].input_dim()
                )));
            }
        }
        for (k, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.output_dim() {
                return Err(Error::Shape(format!("layer {k} bias length mismatch")));
            }
            if layer.activation == Activation::Softmax && k + 1 != layers.len() {
                return Err(Error::Shape("softmax may only be the final activation".into()));
            }
            if layer.weight.iter().chain(layer.bias.iter()).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("parameters of layer {k}")));
            }
        }
        let layers = layers
            .into_iter()
            .map(|l| Dense {
                weight: l.weight.as_standard_layout().into_owned(),
                bias: l.bias,
                activation: l.activation,
            })
            .collect();
        Ok(Self { layers })
    }

    /// Glorot-uniform weights and zero biases.
    pub fn init<R: Rng + ?Sized>(sizes: &[usize], activations: &[Activation], rng: &mut R) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::Shape("need at least input and output sizes".into()));
        }
        if activations.len() != sizes.len() - 1 {
            return Err(Error::Shape(format!(
                "{} layer sizes need {} activations, got {}",
                sizes.len(),
                sizes.len() - 1,
                activations.len()
            )));
        }
        if sizes.contains(&0) {
            return Err(Error::Shape("layer sizes must be positive".into()));
        }
        let layers = sizes
            .windows(2)
            .zip(activations)
            .map(|(io, &activation)| {
                let (fan_in, fan_out) = (io[0], io[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let weight = Array2::from_shape_simple_fn((fan_out, fan_in), || {
                    lit(rng.random_range(-limit..=limit))
                });
                Dense {
                    weight,
                    bias: Array1::zeros(fan_out),
                    activation,
                }
            })
            .collect();
        Self::from_layers(layers)
    }

    pub fn layers(&self) -> &[Dense<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense<T>] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    /// Layer widths including the input, e.g. `[in, h1, ..., out]`.
    pub fn sizes(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(Dense::output_dim))
            .collect()
    }

    pub fn activations(&self) -> Vec<Activation> {
        self.layers.iter().map(|l| l.activation).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// All parameters in storage order: per layer, weights row-major then biases.
    pub fn params(&self) -> impl Iterator<Item = T> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()).copied())
    }

    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(&mut T)) {
        for layer in &mut self.layers {
            layer.weight.iter_mut().for_each(&mut f);
            layer.bias.iter_mut().for_each(&mut f);
        }
    }

    fn param_slot(&mut self, index: usize) -> &mut T {
        let mut rest = index;
        for layer in &mut self.layers {
            let wlen = layer.weight.len();
            if rest < wlen {
                return &mut layer.weight.as_slice_mut().expect("standard layout")[rest];
            }
            rest -= wlen;
            if rest < layer.bias.len() {
                return &mut layer.bias[rest];
            }
            rest -= layer.bias.len();
        }
        panic!("parameter index {index} out of range")
    }

    pub fn param(&self, index: usize) -> T {
        let mut rest = index;
        for layer in &self.layers {
            if rest < layer.weight.len() {
                return layer.weight.as_slice().expect("standard layout")[rest];
            }
            rest -= layer.weight.len();
            if rest < layer.bias.len() {
                return layer.bias[rest];
            }
            rest -= layer.bias.len();
        }
        panic!("parameter index {index} out of range")
    }

    pub fn set_param(&mut self, index: usize, value: T) {
        *self.param_slot(index) = value;
    }

    pub fn max_abs_param(&self) -> T {
        self.params().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    fn check_width(&self, batch: &ArrayView2<'_, T>) -> Result<()> {
        if batch.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                actual: batch.ncols(),
            });
        }
        Ok(())
    }

    /// Forward pass keeping every pre-activation and activation.
    pub fn forward(&self, batch: ArrayView2<'_, T>) -> Result<ForwardCache<T>> {
        self.check_width(&batch)?;
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        let mut activations: Vec<Array2<T>> = Vec::with_capacity(self.layers.len());
        for (k, layer) in self.layers.iter().enumerate() {
            let prev = activations.last().map(|a| a.view()).unwrap_or(batch);
            let z = prev.dot(&layer.weight.t()) + &layer.bias;
            let a = layer.activation.apply(&z);
            if a.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("activation of layer {k}")));
            }
            pre_activations.push(z);
            activations.push(a);
        }
        Ok(ForwardCache {
            input: batch.to_owned(),
            pre_activations,
            activations,
        })
    }

    /// Forward pass returning only the output.
    pub fn predict(&self, batch: ArrayView2<'_, T>) -> Result<Array2<T>> {
        self.predict_inner(batch, None)
    }

    /// Forward pass that also records, for every leaky-ReLU pre-activation,
    /// whether it is positive.
    pub fn predict_with_kinks(&self, batch: ArrayView2<'_, T>, signature: &mut Vec<bool>) -> Result<Array2<T>> {
        self.predict_inner(batch, Some(signature))
    }

    fn predict_inner(&self, batch: ArrayView2<'_, T>, mut signature: Option<&mut Vec<bool>>) -> Result<Array2<T>> {
        self.check_width(&batch)?;
        let mut current: Option<Array2<T>> = None;
        for (k, layer) in self.layers.iter().enumerate() {
            let prev = current.as_ref().map(|a| a.view()).unwrap_or(batch);
            let z = prev.dot(&layer.weight.t()) + &layer.bias;
            if let (Some(sig), Activation::LeakyRelu { .. }) = (signature.as_deref_mut(), layer.activation) {
                sig.extend(z.iter().map(|&v| v > T::zero()));
            }
            let a = layer.activation.apply(&z);
            if a.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("activation of layer {k}")));
            }
            current = Some(a);
        }
        Ok(current.expect("non-empty network"))
    }

    /// Reverse-mode pass. Returns parameter gradients and `∂loss/∂input`.
    pub fn backward(&self, cache: &ForwardCache<T>, upstream: ArrayView2<'_, T>) -> Result<(Gradients<T>, Array2<T>)> {
        let n = cache.input.nrows();
        if cache.activations.len() != self.layers.len()
            || cache.pre_activations.len() != self.layers.len()
            || cache.input.ncols() != self.input_dim()
            || cache
                .activations
                .iter()
                .zip(&self.layers)
                .any(|(a, l)| a.dim() != (n, l.output_dim()))
        {
            return Err(Error::Shape("forward cache does not belong to this network".into()));
        }
        if upstream.dim() != (n, self.output_dim()) {
            return Err(Error::Shape(format!(
                "upstream gradient is {:?}, output is {:?}",
                upstream.dim(),
                (n, self.output_dim())
            )));
        }

        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta_out = upstream.to_owned();
        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            let delta = match layer.activation {
                Activation::Softmax => {
                    let p = &cache.activations[k];
                    let inner = (&delta_out * p).sum_axis(Axis(1)).insert_axis(Axis(1));
                    (&delta_out - &inner) * p
                }
                act => {
                    let mut d = delta_out;
                    Zip::from(&mut d)
                        .and(&cache.pre_activations[k])
                        .for_each(|g, &z| *g = *g * act.derivative_scalar(z));
                    d
                }
            };
            let prev = if k == 0 {
                cache.input.view()
            } else {
                cache.activations[k - 1].view()
            };
            let dw = delta.t().dot(&prev).as_standard_layout().into_owned();
            let db = delta.sum_axis(Axis(0));
            delta_out = delta.dot(&layer.weight);
            grads.push((dw, db));
        }
        grads.reverse();
        Ok((Gradients { layers: grads }, delta_out))
    }
}

/// Seeded convenience constructor.
pub fn init_mlp<T: Scalar>(sizes: &[usize], activations: &[Activation], seed: u64) -> Result<Mlp<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Mlp::init(sizes, activations, &mut rng)
}

/// A scalar loss of a network output together with its output gradient.
pub trait OutputLoss<T: Scalar> {
    fn evaluate(&self, output: ArrayView2<'_, T>) -> Result<(T, Array2<T>)>;

    /// Sign pattern of leaky-ReLU units inside the loss itself (for losses
    /// that run another network on the output). Empty when there are none.
    fn kink_signature(&self, _output: ArrayView2<'_, T>) -> Result<Vec<bool>> {
        Ok(Vec::new())
    }
}

impl<T, F> OutputLoss<T> for F
where
    T: Scalar,
    F: Fn(ArrayView2<'_, T>) -> Result<(T, Array2<T>)>,
{
    fn evaluate(&self, output: ArrayView2<'_, T>) -> Result<(T, Array2<T>)> {
        self(output)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FiniteDiffOptions {
    pub step: f64,
    /// Networks with more parameters than this are checked on a random subset of this size.
    pub max_params: usize,
    pub seed: u64,
}

impl Default for FiniteDiffOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_params: 2000,
            seed: 0,
        }
    }
}

/// Relative disagreement `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Result of a finite-difference comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FiniteDiffReport {
    pub max_relative_error: f64,
    pub checked: usize,
    /// Parameters whose ±step moved some leaky-ReLU input across 0; the
    /// central difference is meaningless there, so they are not compared.
    pub skipped_at_kinks: usize,
}

/// Compares backprop gradients against central differences; returns the
/// maximum relative error over the checked parameters.
pub fn finite_diff_check<T: Scalar, L: OutputLoss<T> + ?Sized>(
    net: &Mlp<T>,
    loss: &L,
    batch: ArrayView2<'_, T>,
    options: FiniteDiffOptions,
) -> Result<f64> {
    finite_diff_report(net, loss, batch, options).map(|r| r.max_relative_error)
}

pub fn finite_diff_report<T: Scalar, L: OutputLoss<T> + ?Sized>(
    net: &Mlp<T>,
    loss: &L,
    batch: ArrayView2<'_, T>,
    options: FiniteDiffOptions,
) -> Result<FiniteDiffReport> {
    let cache = net.forward(batch)?;
    let (value, upstream) = loss.evaluate(cache.output().view())?;
    if !value.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    let (grads, _) = net.backward(&cache, upstream.view())?;

    let total = net.param_count();
    let budget = options.max_params.max(500);
    let indices: Vec<usize> = if total <= budget {
        (0..total).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
        let mut picked = sample(&mut rng, total, budget).into_vec();
        picked.sort_unstable();
        picked
    };

    let evaluate = |probe: &Mlp<T>| -> Result<(f64, Vec<bool>)> {
        let mut signature = Vec::new();
        let out = probe.predict_with_kinks(batch, &mut signature)?;
        signature.extend(loss.kink_signature(out.view())?);
        let v = loss.evaluate(out.view())?.0;
        if !v.is_finite() {
            return Err(Error::NonFinite("perturbed loss".into()));
        }
        Ok((v.to_f64_lossy(), signature))
    };

    let mut probe = net.clone();
    let mut report = FiniteDiffReport {
        max_relative_error: 0.0,
        checked: 0,
        skipped_at_kinks: 0,
    };
    let h = options.step;
    for idx in indices {
        let original = probe.param(idx);
        probe.set_param(idx, T::from_f64_lossy(original.to_f64_lossy() + h));
        let (plus, sig_plus) = evaluate(&probe)?;
        probe.set_param(idx, T::from_f64_lossy(original.to_f64_lossy() - h));
        let (minus, sig_minus) = evaluate(&probe)?;
        probe.set_param(idx, original);
        if sig_plus != sig_minus {
            report.skipped_at_kinks += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * h);
        let r = relative_error(grads.get(idx).to_f64_lossy(), numeric);
        report.max_relative_error = report.max_relative_error.max(r);
        report.checked += 1;
    }
    Ok(report)
}
