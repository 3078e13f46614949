//! Dense feed-forward networks with explicit backpropagation.
//!
//! The building block for every learned function in this crate: tanh- or
//! ReLU-activated multilayer perceptrons with a configurable output head,
//! trained by Adam. Gradients are computed by hand-written reverse-mode
//! differentiation; [`finite_diff_check`] verifies any network's analytic
//! gradients against central finite differences and is wired into the test
//! and acceptance suites.
//!
//! Networks are plain value objects: `forward` never mutates, and parameters
//! change only through [`adam_step`] and [`soft_update`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::scalar::{real, Scalar};

/// Lower clamp for the log-standard-deviation half of a Gaussian head.
pub const LOG_STD_MIN: f64 = -20.0;
/// Upper clamp for the log-standard-deviation half of a Gaussian head.
pub const LOG_STD_MAX: f64 = 2.0;

/// Hidden-layer nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// `max(0, x)`; the subgradient at exactly 0 is taken to be 0.
    Relu,
    Tanh,
}

/// Transformation applied to the final affine layer's output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputHead {
    /// Identity.
    Linear,
    /// Elementwise `tanh`, bounding outputs to `(-1, 1)`.
    Tanh,
    /// Stochastic-policy head: the final layer must emit `2 * k` values,
    /// read as `k` means followed by `k` log-standard-deviations; the
    /// log-stds are clamped to `[LOG_STD_MIN, LOG_STD_MAX]`.
    Gaussian,
}

/// Errors produced by network construction, evaluation, and updates.
#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("input has length {got}, network expects {expected}")]
    InputDim { expected: usize, got: usize },
    #[error("upstream gradient has length {got}, network output has length {expected}")]
    UpstreamDim { expected: usize, got: usize },
    #[error("forward cache does not match this network at layer {layer} (cached width {got}, expected {expected})")]
    CacheShape { layer: usize, expected: usize, got: usize },
    #[error("non-finite gradient entering layer {layer}")]
    NonFiniteGradient { layer: usize },
    #[error("network architectures differ: {detail}")]
    ArchitectureMismatch { detail: String },
    #[error("invalid architecture: {detail}")]
    InvalidArchitecture { detail: String },
    #[error("gradient or optimizer shape mismatch at layer {layer}")]
    GradShape { layer: usize },
}

/// One affine layer: `y = W x + b` with `W` stored row-major `[out × in]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer<T> {
    pub(crate) weights: Vec<T>,
    pub(crate) biases: Vec<T>,
    pub(crate) in_dim: usize,
    pub(crate) out_dim: usize,
}

impl<T: Scalar> DenseLayer<T> {
    fn zeroed(in_dim: usize, out_dim: usize) -> Self {
        Self {
            weights: vec![T::zero(); in_dim * out_dim],
            biases: vec![T::zero(); out_dim],
            in_dim,
            out_dim,
        }
    }

    /// Affine map into a freshly allocated output vector.
    fn affine(&self, input: &[T]) -> Vec<T> {
        let mut out = Vec::with_capacity(self.out_dim);
        for (row, b) in self.weights.chunks_exact(self.in_dim).zip(&self.biases) {
            let mut acc = *b;
            for (w, x) in row.iter().zip(input) {
                acc = w.mul_add(*x, acc);
            }
            out.push(acc);
        }
        out
    }
}

/// Fully connected network with uniform hidden activation and one output head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseNetwork<T> {
    layer_sizes: Vec<usize>,
    layers: Vec<DenseLayer<T>>,
    hidden_activation: Activation,
    output_head: OutputHead,
}

/// Activations recorded by [`DenseNetwork::forward_cached`], consumed by
/// [`DenseNetwork::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    input: Vec<T>,
    /// Pre-activation (affine) output of every layer.
    pre: Vec<Vec<T>>,
    /// Post-activation output of every layer; the last entry is the network
    /// output after the head transformation.
    post: Vec<Vec<T>>,
}

impl<T: Scalar> ForwardCache<T> {
    /// The network output this cache was recorded for.
    pub fn output(&self) -> &[T] {
        self.post.last().expect("cache holds at least one layer")
    }
}

/// Per-layer parameter gradients, in the same shapes as the network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientBundle<T> {
    pub(crate) d_weights: Vec<Vec<T>>,
    pub(crate) d_biases: Vec<Vec<T>>,
}

impl<T: Scalar> GradientBundle<T> {
    /// All-zero gradients shaped like `net`.
    pub fn zeros_like(net: &DenseNetwork<T>) -> Self {
        Self {
            d_weights: net.layers.iter().map(|l| vec![T::zero(); l.weights.len()]).collect(),
            d_biases: net.layers.iter().map(|l| vec![T::zero(); l.biases.len()]).collect(),
        }
    }

    /// Elementwise `self += other`. Shapes must match.
    pub fn accumulate(&mut self, other: &Self) {
        debug_assert_eq!(self.d_weights.len(), other.d_weights.len());
        for (a, b) in self.d_weights.iter_mut().zip(&other.d_weights) {
            for (x, y) in a.iter_mut().zip(b) {
                *x = *x + *y;
            }
        }
        for (a, b) in self.d_biases.iter_mut().zip(&other.d_biases) {
            for (x, y) in a.iter_mut().zip(b) {
                *x = *x + *y;
            }
        }
    }

    /// Elementwise multiplication by a scalar.
    pub fn scale(&mut self, factor: T) {
        for layer in self.d_weights.iter_mut().chain(self.d_biases.iter_mut()) {
            for g in layer.iter_mut() {
                *g = *g * factor;
            }
        }
    }

    /// Gradient at the given flat parameter index (layer-major, weights
    /// before biases within a layer) — the same ordering as
    /// [`DenseNetwork::param`].
    pub fn flat(&self, mut index: usize) -> T {
        for (w, b) in self.d_weights.iter().zip(&self.d_biases) {
            if index < w.len() {
                return w[index];
            }
            index -= w.len();
            if index < b.len() {
                return b[index];
            }
            index -= b.len();
        }
        panic!("flat gradient index out of range");
    }

    /// True if every entry is finite.
    pub fn is_finite(&self) -> bool {
        self.d_weights
            .iter()
            .chain(self.d_biases.iter())
            .all(|layer| layer.iter().all(|g| g.is_finite()))
    }
}

impl<T: Scalar> DenseNetwork<T> {
    /// Build a network with weights and biases drawn uniformly from
    /// `[-1/sqrt(fan_in), +1/sqrt(fan_in)]` per layer.
    pub fn new(
        layer_sizes: &[usize],
        hidden_activation: Activation,
        output_head: OutputHead,
        rng: &mut impl Rng,
    ) -> Result<Self, NnError> {
        let mut net = Self::zeroed(layer_sizes, hidden_activation, output_head)?;
        for layer in &mut net.layers {
            let bound = 1.0 / (layer.in_dim as f64).sqrt();
            for w in layer.weights.iter_mut().chain(layer.biases.iter_mut()) {
                *w = T::uniform(rng, -bound, bound);
            }
        }
        Ok(net)
    }

    /// Build a network with every parameter set to zero.
    pub fn zeroed(
        layer_sizes: &[usize],
        hidden_activation: Activation,
        output_head: OutputHead,
    ) -> Result<Self, NnError> {
        if layer_sizes.len() < 2 {
            return Err(NnError::InvalidArchitecture {
                detail: format!("need at least input and output sizes, got {layer_sizes:?}"),
            });
        }
        if layer_sizes.contains(&0) {
            return Err(NnError::InvalidArchitecture {
                detail: format!("zero-width layer in {layer_sizes:?}"),
            });
        }
        if output_head == OutputHead::Gaussian && !layer_sizes.last().unwrap().is_multiple_of(2) {
            return Err(NnError::InvalidArchitecture {
                detail: format!(
                    "gaussian head needs an even final layer, got {}",
                    layer_sizes.last().unwrap()
                ),
            });
        }
        let layers = layer_sizes
            .windows(2)
            .map(|w| DenseLayer::zeroed(w[0], w[1]))
            .collect();
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            layers,
            hidden_activation,
            output_head,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    /// Length of the output vector (after the head transformation).
    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn hidden_activation(&self) -> Activation {
        self.hidden_activation
    }

    pub fn output_head(&self) -> OutputHead {
        self.output_head
    }

    /// Total number of parameters.
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    /// Read the parameter at a flat index (layer-major, weights before
    /// biases within each layer, weights row-major).
    pub fn param(&self, mut index: usize) -> T {
        for layer in &self.layers {
            if index < layer.weights.len() {
                return layer.weights[index];
            }
            index -= layer.weights.len();
            if index < layer.biases.len() {
                return layer.biases[index];
            }
            index -= layer.biases.len();
        }
        panic!("flat parameter index out of range");
    }

    /// Write the parameter at a flat index (see [`Self::param`]).
    pub fn set_param(&mut self, mut index: usize, value: T) {
        for layer in &mut self.layers {
            if index < layer.weights.len() {
                layer.weights[index] = value;
                return;
            }
            index -= layer.weights.len();
            if index < layer.biases.len() {
                layer.biases[index] = value;
                return;
            }
            index -= layer.biases.len();
        }
        panic!("flat parameter index out of range");
    }

    /// Set a single weight: `layer` indexes affine layers from the input.
    pub fn set_weight(&mut self, layer: usize, row: usize, col: usize, value: T) {
        let l = &mut self.layers[layer];
        l.weights[row * l.in_dim + col] = value;
    }

    /// Set a single bias.
    pub fn set_bias(&mut self, layer: usize, row: usize, value: T) {
        self.layers[layer].biases[row] = value;
    }

    /// Check that two networks share an architecture (sizes, activation,
    /// head), e.g. an online network and its target copy.
    pub fn congruent(&self, other: &Self) -> Result<(), NnError> {
        if self.layer_sizes != other.layer_sizes
            || self.hidden_activation != other.hidden_activation
            || self.output_head != other.output_head
        {
            return Err(NnError::ArchitectureMismatch {
                detail: format!(
                    "{:?}/{:?}/{:?} vs {:?}/{:?}/{:?}",
                    self.layer_sizes,
                    self.hidden_activation,
                    self.output_head,
                    other.layer_sizes,
                    other.hidden_activation,
                    other.output_head
                ),
            });
        }
        Ok(())
    }

    fn check_input(&self, input: &[T]) -> Result<(), NnError> {
        if input.len() != self.input_dim() {
            return Err(NnError::InputDim {
                expected: self.input_dim(),
                got: input.len(),
            });
        }
        Ok(())
    }

    fn apply_hidden(&self, pre: &[T]) -> Vec<T> {
        match self.hidden_activation {
            Activation::Relu => pre
                .iter()
                .map(|&z| if z > T::zero() { z } else { T::zero() })
                .collect(),
            Activation::Tanh => pre.iter().map(|z| z.tanh()).collect(),
        }
    }

    fn apply_head(&self, pre: &[T]) -> Vec<T> {
        match self.output_head {
            OutputHead::Linear => pre.to_vec(),
            OutputHead::Tanh => pre.iter().map(|z| z.tanh()).collect(),
            OutputHead::Gaussian => {
                let k = pre.len() / 2;
                let lo = real::<T>(LOG_STD_MIN);
                let hi = real::<T>(LOG_STD_MAX);
                let mut out = pre.to_vec();
                for v in out[k..].iter_mut() {
                    *v = (*v).max(lo).min(hi);
                }
                out
            }
        }
    }

    /// Evaluate the network. Pure: `self` is untouched.
    pub fn forward(&self, input: &[T]) -> Result<Vec<T>, NnError> {
        self.check_input(input)?;
        let last = self.layers.len() - 1;
        let mut x = input.to_vec();
        for (l, layer) in self.layers.iter().enumerate() {
            let pre = layer.affine(&x);
            x = if l == last { self.apply_head(&pre) } else { self.apply_hidden(&pre) };
        }
        Ok(x)
    }

    /// Evaluate the network and record every layer's activations for a
    /// subsequent [`Self::backward`] pass.
    pub fn forward_cached(&self, input: &[T]) -> Result<(Vec<T>, ForwardCache<T>), NnError> {
        self.check_input(input)?;
        let last = self.layers.len() - 1;
        let mut pre_all = Vec::with_capacity(self.layers.len());
        let mut post_all = Vec::with_capacity(self.layers.len());
        let mut x = input.to_vec();
        for (l, layer) in self.layers.iter().enumerate() {
            let pre = layer.affine(&x);
            x = if l == last { self.apply_head(&pre) } else { self.apply_hidden(&pre) };
            pre_all.push(pre);
            post_all.push(x.clone());
        }
        Ok((
            x,
            ForwardCache {
                input: input.to_vec(),
                pre: pre_all,
                post: post_all,
            },
        ))
    }

    fn check_cache(&self, cache: &ForwardCache<T>) -> Result<(), NnError> {
        if cache.input.len() != self.input_dim() {
            return Err(NnError::CacheShape {
                layer: 0,
                expected: self.input_dim(),
                got: cache.input.len(),
            });
        }
        if cache.pre.len() != self.layers.len() || cache.post.len() != self.layers.len() {
            return Err(NnError::CacheShape {
                layer: cache.pre.len(),
                expected: self.layers.len(),
                got: cache.pre.len().min(cache.post.len()),
            });
        }
        for (l, (pre, layer)) in cache.pre.iter().zip(&self.layers).enumerate() {
            if pre.len() != layer.out_dim {
                return Err(NnError::CacheShape {
                    layer: l,
                    expected: layer.out_dim,
                    got: pre.len(),
                });
            }
        }
        Ok(())
    }

    /// Reverse-mode differentiation: given `d objective / d output`
    /// (`upstream`), return the gradients of the objective with respect to
    /// every parameter, plus the gradient with respect to the input vector.
    ///
    /// `cache` must come from [`Self::forward_cached`] on this network with
    /// the same parameters.
    pub fn backward(
        &self,
        cache: &ForwardCache<T>,
        upstream: &[T],
    ) -> Result<(GradientBundle<T>, Vec<T>), NnError> {
        let mut bundle = GradientBundle::zeros_like(self);
        let d_input = self.backward_accumulate(cache, upstream, &mut bundle)?;
        Ok((bundle, d_input))
    }

    /// [`Self::backward`] that adds the parameter gradients into an existing
    /// bundle instead of allocating a new one — the workhorse for batched
    /// updates, where per-sample gradients are summed in place.
    pub fn backward_accumulate(
        &self,
        cache: &ForwardCache<T>,
        upstream: &[T],
        into: &mut GradientBundle<T>,
    ) -> Result<Vec<T>, NnError> {
        self.check_cache(cache)?;
        let out_dim = self.output_dim();
        if upstream.len() != out_dim {
            return Err(NnError::UpstreamDim {
                expected: out_dim,
                got: upstream.len(),
            });
        }

        if into.d_weights.len() != self.layers.len() {
            return Err(NnError::GradShape { layer: 0 });
        }
        let last = self.layers.len() - 1;

        // Gradient at the last layer's pre-activation, through the head.
        let mut d_pre: Vec<T> = match self.output_head {
            OutputHead::Linear => upstream.to_vec(),
            OutputHead::Tanh => upstream
                .iter()
                .zip(&cache.post[last])
                .map(|(&g, &y)| g * (T::one() - y * y))
                .collect(),
            OutputHead::Gaussian => {
                let k = out_dim / 2;
                let lo = real::<T>(LOG_STD_MIN);
                let hi = real::<T>(LOG_STD_MAX);
                upstream
                    .iter()
                    .zip(&cache.pre[last])
                    .enumerate()
                    .map(|(i, (&g, &raw))| {
                        // The clamp saturates: no gradient outside the open
                        // interval.
                        if i < k || (raw > lo && raw < hi) {
                            g
                        } else {
                            T::zero()
                        }
                    })
                    .collect()
            }
        };

        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let x: &[T] = if l == 0 { &cache.input } else { &cache.post[l - 1] };

            if into.d_weights[l].len() != layer.weights.len()
                || into.d_biases[l].len() != layer.biases.len()
            {
                return Err(NnError::GradShape { layer: l });
            }
            let dw = &mut into.d_weights[l];
            let db = &mut into.d_biases[l];
            let mut d_x = vec![T::zero(); layer.in_dim];
            for (i, (&g, row)) in d_pre.iter().zip(layer.weights.chunks_exact(layer.in_dim)).enumerate() {
                db[i] = db[i] + g;
                let dw_row = &mut dw[i * layer.in_dim..(i + 1) * layer.in_dim];
                for ((dwij, &xj), (dxj, &wij)) in
                    dw_row.iter_mut().zip(x).zip(d_x.iter_mut().zip(row))
                {
                    *dwij = g.mul_add(xj, *dwij);
                    *dxj = g.mul_add(wij, *dxj);
                }
            }

            if l == 0 {
                return Ok(d_x);
            }

            // Chain through the previous hidden layer's activation.
            let pre_prev = &cache.pre[l - 1];
            let post_prev = &cache.post[l - 1];
            d_pre = match self.hidden_activation {
                Activation::Relu => d_x
                    .iter()
                    .zip(pre_prev)
                    .map(|(&g, &z)| if z > T::zero() { g } else { T::zero() })
                    .collect(),
                Activation::Tanh => d_x
                    .iter()
                    .zip(post_prev)
                    .map(|(&g, &y)| g * (T::one() - y * y))
                    .collect(),
            };
        }
        unreachable!("loop returns at layer 0");
    }
}

/// Adam hyperparameters. The one learning rate applies to every network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamParams {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }
}

/// First/second-moment accumulators for one network, plus the step counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState<T> {
    m_weights: Vec<Vec<T>>,
    v_weights: Vec<Vec<T>>,
    m_biases: Vec<Vec<T>>,
    v_biases: Vec<Vec<T>>,
    step_count: u64,
}

impl<T: Scalar> AdamState<T> {
    /// Zeroed moments shaped like `net`, step count 0.
    pub fn new(net: &DenseNetwork<T>) -> Self {
        Self {
            m_weights: net.layers.iter().map(|l| vec![T::zero(); l.weights.len()]).collect(),
            v_weights: net.layers.iter().map(|l| vec![T::zero(); l.weights.len()]).collect(),
            m_biases: net.layers.iter().map(|l| vec![T::zero(); l.biases.len()]).collect(),
            v_biases: net.layers.iter().map(|l| vec![T::zero(); l.biases.len()]).collect(),
            step_count: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }
}

/// One bias-corrected Adam update of `net` along `grads`.
///
/// Rejects non-finite gradients (naming the offending layer) before touching
/// any parameter, so a failed update leaves the network unchanged.
pub fn adam_step<T: Scalar>(
    net: &mut DenseNetwork<T>,
    state: &mut AdamState<T>,
    grads: &GradientBundle<T>,
    params: &AdamParams,
) -> Result<(), NnError> {
    if grads.d_weights.len() != net.layers.len() || state.m_weights.len() != net.layers.len() {
        return Err(NnError::GradShape { layer: 0 });
    }
    for (l, layer) in net.layers.iter().enumerate() {
        if grads.d_weights[l].len() != layer.weights.len()
            || grads.d_biases[l].len() != layer.biases.len()
        {
            return Err(NnError::GradShape { layer: l });
        }
        let finite = grads.d_weights[l].iter().all(|g| g.is_finite())
            && grads.d_biases[l].iter().all(|g| g.is_finite());
        if !finite {
            return Err(NnError::NonFiniteGradient { layer: l });
        }
    }

    state.step_count += 1;
    let t = state.step_count;
    let beta1 = real::<T>(params.beta1);
    let beta2 = real::<T>(params.beta2);
    let eps = real::<T>(params.epsilon);
    let one = T::one();
    // Bias corrections folded into a per-step effective learning rate on the
    // first moment and a divisor on the second.
    let corr1 = one - beta1.powi(t as i32);
    let corr2 = one - beta2.powi(t as i32);
    let lr = real::<T>(params.learning_rate);

    for (l, layer) in net.layers.iter_mut().enumerate() {
        let tensors = [
            (&mut layer.weights, &grads.d_weights[l], &mut state.m_weights[l], &mut state.v_weights[l]),
            (&mut layer.biases, &grads.d_biases[l], &mut state.m_biases[l], &mut state.v_biases[l]),
        ];
        for (param, grad, m, v) in tensors {
            for (((p, &g), mi), vi) in param.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = beta1 * *mi + (one - beta1) * g;
                *vi = beta2 * *vi + (one - beta2) * g * g;
                let m_hat = *mi / corr1;
                let v_hat = *vi / corr2;
                *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
    Ok(())
}

/// Polyak averaging: `target = (1 - tau) * target + tau * online`.
///
/// Both networks must share an architecture.
pub fn soft_update<T: Scalar>(
    target: &mut DenseNetwork<T>,
    online: &DenseNetwork<T>,
    tau: T,
) -> Result<(), NnError> {
    target.congruent(online)?;
    let keep = T::one() - tau;
    for (t_layer, o_layer) in target.layers.iter_mut().zip(&online.layers) {
        for (t, o) in t_layer
            .weights
            .iter_mut()
            .chain(t_layer.biases.iter_mut())
            .zip(o_layer.weights.iter().chain(o_layer.biases.iter()))
        {
            *t = keep * *t + tau * *o;
        }
    }
    Ok(())
}

/// Differentiable reduction of a network's output vector to a scalar, used
/// to pose gradient-check objectives.
#[derive(Debug, Clone)]
pub enum Reduction<T> {
    /// Sum of all outputs.
    Sum,
    /// Inner product with a fixed weight vector (exercises every output
    /// component distinctly).
    WeightedSum(Vec<T>),
}

impl<T: Scalar> Reduction<T> {
    pub fn value(&self, output: &[T]) -> T {
        match self {
            Reduction::Sum => output.iter().fold(T::zero(), |acc, &y| acc + y),
            Reduction::WeightedSum(w) => {
                assert_eq!(w.len(), output.len(), "reduction weight length mismatch");
                w.iter().zip(output).fold(T::zero(), |acc, (&wi, &yi)| wi.mul_add(yi, acc))
            }
        }
    }

    pub fn gradient(&self, output_len: usize) -> Vec<T> {
        match self {
            Reduction::Sum => vec![T::one(); output_len],
            Reduction::WeightedSum(w) => {
                assert_eq!(w.len(), output_len, "reduction weight length mismatch");
                w.clone()
            }
        }
    }
}

/// Floor applied to the denominator of relative gradient errors, so that
/// parameters with near-zero true gradients are compared absolutely.
pub const REL_ERROR_FLOOR: f64 = 1e-3;

/// Compare analytic parameter gradients of `reduction ∘ net` at `input`
/// against central finite differences; returns the worst relative error
/// (`|analytic - numeric| / max(|analytic|, REL_ERROR_FLOOR)`).
///
/// `eps` must lie in `[1e-7, 1e-3]` — wide enough to dominate round-off,
/// small enough to keep truncation error negligible in double precision.
pub fn finite_diff_check<T: Scalar>(
    net: &DenseNetwork<T>,
    input: &[T],
    reduction: &Reduction<T>,
    eps: T,
) -> Result<T, NnError> {
    assert!(
        eps.as_f64() >= 1e-7 && eps.as_f64() <= 1e-3,
        "finite-difference step {eps} outside [1e-7, 1e-3]"
    );
    let (output, cache) = net.forward_cached(input)?;
    let upstream = reduction.gradient(output.len());
    let (analytic, _) = net.backward(&cache, &upstream)?;

    let mut probe = net.clone();
    let floor = real::<T>(REL_ERROR_FLOOR);
    let two = real::<T>(2.0);
    let mut worst = T::zero();
    for i in 0..net.param_count() {
        let original = probe.param(i);
        probe.set_param(i, original + eps);
        let f_plus = reduction.value(&probe.forward(input)?);
        probe.set_param(i, original - eps);
        let f_minus = reduction.value(&probe.forward(input)?);
        probe.set_param(i, original);

        let numeric = (f_plus - f_minus) / (two * eps);
        let a = analytic.flat(i);
        let rel = (a - numeric).abs() / a.abs().max(floor);
        if rel > worst {
            worst = rel;
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::seeded_stream;

    /// Independent reference forward pass: naive loops, no shared code with
    /// the implementation under test.
    fn reference_forward_relu(
        weights: &[Vec<Vec<f64>>],
        biases: &[Vec<f64>],
        input: &[f64],
        relu_layers: usize,
    ) -> Vec<f64> {
        let mut x = input.to_vec();
        for (l, (w, b)) in weights.iter().zip(biases).enumerate() {
            let mut y = vec![0.0; w.len()];
            for (i, row) in w.iter().enumerate() {
                let mut acc = b[i];
                for (j, &xj) in x.iter().enumerate() {
                    acc += row[j] * xj;
                }
                y[i] = acc;
            }
            if l < relu_layers {
                for v in y.iter_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            x = y;
        }
        x
    }

    #[test]
    fn zero_network_maps_everything_to_zero() {
        let net = DenseNetwork::<f64>::zeroed(&[3, 4, 2], Activation::Relu, OutputHead::Linear)
            .unwrap();
        let y = net.forward(&[1.0, -2.0, 0.5]).unwrap();
        assert_eq!(y, vec![0.0, 0.0]);
    }

    #[test]
    fn identity_single_layer_returns_input() {
        let mut net =
            DenseNetwork::<f64>::zeroed(&[3, 3], Activation::Relu, OutputHead::Linear).unwrap();
        for i in 0..3 {
            net.set_weight(0, i, i, 1.0);
        }
        let x = [0.3, -1.7, 2.5];
        assert_eq!(net.forward(&x).unwrap(), x.to_vec());
    }

    #[test]
    fn seeded_relu_network_matches_reference_forward() {
        let mut rng = seeded_stream(11, 0);
        let net =
            DenseNetwork::<f64>::new(&[2, 3, 1], Activation::Relu, OutputHead::Linear, &mut rng)
                .unwrap();
        // Extract parameters into plain nested vectors for the reference.
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for layer in &net.layers {
            let mut w = Vec::new();
            for row in layer.weights.chunks_exact(layer.in_dim) {
                w.push(row.to_vec());
            }
            weights.push(w);
            biases.push(layer.biases.clone());
        }
        let input = [0.7, -0.4];
        let expected = reference_forward_relu(&weights, &biases, &input, 1);
        let got = net.forward(&input).unwrap();
        assert_eq!(got.len(), 1);
        assert!(
            (got[0] - expected[0]).abs() < 1e-15,
            "forward {} vs reference {}",
            got[0],
            expected[0]
        );
    }

    #[test]
    fn single_linear_layer_chain_rule() {
        // y = w*x + b with w = 3, b = 1, x = 2; upstream gradient 1.
        let mut net =
            DenseNetwork::<f64>::zeroed(&[1, 1], Activation::Relu, OutputHead::Linear).unwrap();
        net.set_weight(0, 0, 0, 3.0);
        net.set_bias(0, 0, 1.0);
        let (y, cache) = net.forward_cached(&[2.0]).unwrap();
        assert_eq!(y, vec![7.0]);
        let (grads, d_input) = net.backward(&cache, &[1.0]).unwrap();
        assert_eq!(grads.d_weights[0], vec![2.0], "dL/dw = x");
        assert_eq!(grads.d_biases[0], vec![1.0], "dL/db = 1");
        assert_eq!(d_input, vec![3.0], "dL/dx = w");
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        // Hidden pre-activation is exactly 0: no gradient may flow through.
        let mut net =
            DenseNetwork::<f64>::zeroed(&[1, 1, 1], Activation::Relu, OutputHead::Linear).unwrap();
        net.set_weight(0, 0, 0, 1.0); // pre = 1 * 0 + 0 = 0
        net.set_weight(1, 0, 0, 5.0);
        let (y, cache) = net.forward_cached(&[0.0]).unwrap();
        assert_eq!(y, vec![0.0]);
        let (grads, d_input) = net.backward(&cache, &[1.0]).unwrap();
        assert_eq!(grads.d_weights[0], vec![0.0]);
        assert_eq!(grads.d_biases[0], vec![0.0]);
        assert_eq!(d_input, vec![0.0]);
        // The layer above the dead unit still sees its own bias gradient.
        assert_eq!(grads.d_biases[1], vec![1.0]);
    }

    #[test]
    fn tanh_network_gradients_match_finite_differences() {
        let mut rng = seeded_stream(5, 1);
        let net =
            DenseNetwork::<f64>::new(&[4, 8, 8, 2], Activation::Tanh, OutputHead::Tanh, &mut rng)
                .unwrap();
        let input: Vec<f64> = (0..4).map(|_| f64::uniform(&mut rng, -1.0, 1.0)).collect();
        let weights: Vec<f64> = (0..2).map(|_| f64::uniform(&mut rng, -1.0, 1.0)).collect();
        let err = finite_diff_check(&net, &input, &Reduction::WeightedSum(weights), 1e-5).unwrap();
        assert!(err < 1e-6, "worst relative error {err}");
    }

    #[test]
    fn linear_network_finite_difference_error_is_tiny() {
        let mut rng = seeded_stream(6, 2);
        // No hidden layer: a single affine map is exactly linear in its
        // parameters, so central differences are exact up to round-off.
        let net =
            DenseNetwork::<f64>::new(&[5, 3], Activation::Relu, OutputHead::Linear, &mut rng)
                .unwrap();
        let input: Vec<f64> = (0..5).map(|_| f64::uniform(&mut rng, -1.0, 1.0)).collect();
        let err = finite_diff_check(&net, &input, &Reduction::Sum, 1e-4).unwrap();
        assert!(err < 1e-9, "worst relative error {err}");
    }

    #[test]
    fn relu_network_gradients_match_away_from_kinks() {
        let mut rng = seeded_stream(9, 3);
        let net =
            DenseNetwork::<f64>::new(&[3, 6, 6, 2], Activation::Relu, OutputHead::Linear, &mut rng)
                .unwrap();
        let input: Vec<f64> = (0..3).map(|_| f64::uniform(&mut rng, 0.2, 1.0)).collect();
        let err = finite_diff_check(&net, &input, &Reduction::Sum, 1e-5).unwrap();
        assert!(err < 1e-6, "worst relative error {err}");
    }

    #[test]
    fn gradient_fidelity_holds_across_seeds() {
        // Smooth (tanh) networks of varied shapes: analytic gradients stay
        // within 1e-6 relative error of finite differences for 20 seeds.
        for seed in 0..20u64 {
            let mut rng = seeded_stream(seed, 4);
            let net = DenseNetwork::<f64>::new(
                &[3, 10, 5, 4],
                Activation::Tanh,
                OutputHead::Linear,
                &mut rng,
            )
            .unwrap();
            let input: Vec<f64> = (0..3).map(|_| f64::uniform(&mut rng, -1.5, 1.5)).collect();
            let w: Vec<f64> = (0..4).map(|_| f64::uniform(&mut rng, -1.0, 1.0)).collect();
            let err =
                finite_diff_check(&net, &input, &Reduction::WeightedSum(w), 1e-5).unwrap();
            assert!(err < 1e-6, "seed {seed}: worst relative error {err}");
        }
    }

    #[test]
    fn gaussian_head_clamps_log_std_and_masks_its_gradient() {
        let mut net =
            DenseNetwork::<f64>::zeroed(&[1, 4], Activation::Relu, OutputHead::Gaussian).unwrap();
        // Means (rows 0-1) pass through; log-stds (rows 2-3) clamp.
        net.set_bias(0, 0, 0.5);
        net.set_bias(0, 1, -30.0);
        net.set_bias(0, 2, 7.0); // clamps to LOG_STD_MAX
        net.set_bias(0, 3, -50.0); // clamps to LOG_STD_MIN
        let (y, cache) = net.forward_cached(&[0.0]).unwrap();
        assert_eq!(y, vec![0.5, -30.0, LOG_STD_MAX, LOG_STD_MIN]);
        let (grads, _) = net.backward(&cache, &[1.0, 1.0, 1.0, 1.0]).unwrap();
        // Mean components propagate; saturated log-std components do not.
        assert_eq!(grads.d_biases[0], vec![1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn gaussian_head_requires_even_output() {
        let err = DenseNetwork::<f64>::zeroed(&[2, 3], Activation::Relu, OutputHead::Gaussian);
        assert!(matches!(err, Err(NnError::InvalidArchitecture { .. })));
    }

    #[test]
    fn forward_rejects_wrong_input_length() {
        let net =
            DenseNetwork::<f64>::zeroed(&[3, 2], Activation::Relu, OutputHead::Linear).unwrap();
        match net.forward(&[1.0, 2.0]) {
            Err(NnError::InputDim { expected: 3, got: 2 }) => {}
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn forward_is_pure_and_deterministic() {
        let mut rng = seeded_stream(3, 5);
        let net =
            DenseNetwork::<f64>::new(&[4, 6, 3], Activation::Tanh, OutputHead::Linear, &mut rng)
                .unwrap();
        let before = net.clone();
        let x = [0.1, -0.2, 0.3, -0.4];
        let y1 = net.forward(&x).unwrap();
        let y2 = net.forward(&x).unwrap();
        assert_eq!(y1, y2, "identical input must give bit-identical output");
        assert_eq!(net, before, "forward must not mutate the network");
    }

    #[test]
    fn adam_zero_gradient_changes_nothing_but_the_step_count() {
        let mut rng = seeded_stream(4, 6);
        let mut net =
            DenseNetwork::<f64>::new(&[2, 3, 1], Activation::Relu, OutputHead::Linear, &mut rng)
                .unwrap();
        let before = net.clone();
        let mut state = AdamState::new(&net);
        let grads = GradientBundle::zeros_like(&net);
        adam_step(&mut net, &mut state, &grads, &AdamParams::default()).unwrap();
        assert_eq!(net, before);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn adam_first_step_moves_against_the_gradient_sign() {
        let mut net =
            DenseNetwork::<f64>::zeroed(&[1, 1], Activation::Relu, OutputHead::Linear).unwrap();
        net.set_weight(0, 0, 0, 0.25);
        let mut state = AdamState::new(&net);
        let mut grads = GradientBundle::zeros_like(&net);
        grads.d_weights[0][0] = 0.3;
        let p = AdamParams::default();
        adam_step(&mut net, &mut state, &grads, &p).unwrap();
        // Bias corrections cancel at t = 1: delta = -lr * g / (|g| + eps).
        let expected = 0.25 - p.learning_rate * 0.3 / (0.3 + p.epsilon);
        let got = net.param(0);
        assert!(
            (got - expected).abs() < 1e-15,
            "first Adam step {got} vs hand value {expected}"
        );
        assert!((got - (0.25 - p.learning_rate)).abs() < 1e-10, "delta approximates -lr*sign(g)");
    }

    #[test]
    fn adam_two_steps_match_hand_recurrence() {
        // Independent oracle: evaluate the Adam recurrence directly for a
        // single parameter with constant gradient.
        let g = -0.7;
        let p = AdamParams::default();
        let (mut m, mut v, mut x) = (0.0f64, 0.0f64, 1.5f64);
        for t in 1..=2 {
            m = p.beta1 * m + (1.0 - p.beta1) * g;
            v = p.beta2 * v + (1.0 - p.beta2) * g * g;
            let m_hat = m / (1.0 - p.beta1.powi(t));
            let v_hat = v / (1.0 - p.beta2.powi(t));
            x -= p.learning_rate * m_hat / (v_hat.sqrt() + p.epsilon);
        }

        let mut net =
            DenseNetwork::<f64>::zeroed(&[1, 1], Activation::Relu, OutputHead::Linear).unwrap();
        net.set_weight(0, 0, 0, 1.5);
        let mut state = AdamState::new(&net);
        let mut grads = GradientBundle::zeros_like(&net);
        grads.d_weights[0][0] = g;
        adam_step(&mut net, &mut state, &grads, &p).unwrap();
        adam_step(&mut net, &mut state, &grads, &p).unwrap();
        assert!(
            (net.param(0) - x).abs() < 1e-15,
            "two Adam steps {} vs hand recurrence {x}",
            net.param(0)
        );
        assert_eq!(state.step_count(), 2);
    }

    #[test]
    fn adam_rejects_non_finite_gradients_and_leaves_network_untouched() {
        let mut rng = seeded_stream(8, 7);
        let mut net =
            DenseNetwork::<f64>::new(&[2, 2, 1], Activation::Relu, OutputHead::Linear, &mut rng)
                .unwrap();
        let before = net.clone();
        let mut state = AdamState::new(&net);
        let mut grads = GradientBundle::zeros_like(&net);
        grads.d_biases[1][0] = f64::NAN;
        match adam_step(&mut net, &mut state, &grads, &AdamParams::default()) {
            Err(NnError::NonFiniteGradient { layer: 1 }) => {}
            other => panic!("expected non-finite gradient error, got {other:?}"),
        }
        assert_eq!(net, before);
        assert_eq!(state.step_count(), 0);
    }

    #[test]
    fn parameters_stay_finite_under_repeated_adam_steps() {
        let mut rng = seeded_stream(10, 8);
        let mut net =
            DenseNetwork::<f64>::new(&[3, 8, 2], Activation::Tanh, OutputHead::Linear, &mut rng)
                .unwrap();
        let mut state = AdamState::new(&net);
        let input = [0.4, -0.3, 0.9];
        for _ in 0..200 {
            let (out, cache) = net.forward_cached(&input).unwrap();
            // Descend on the squared norm of the output.
            let upstream: Vec<f64> = out.iter().map(|y| 2.0 * y).collect();
            let (grads, _) = net.backward(&cache, &upstream).unwrap();
            adam_step(&mut net, &mut state, &grads, &AdamParams::default()).unwrap();
        }
        for i in 0..net.param_count() {
            assert!(net.param(i).is_finite());
        }
    }

    #[test]
    fn soft_update_with_tau_one_copies_the_online_network() {
        let mut rng = seeded_stream(12, 9);
        let online =
            DenseNetwork::<f64>::new(&[2, 4, 1], Activation::Relu, OutputHead::Linear, &mut rng)
                .unwrap();
        let mut target =
            DenseNetwork::<f64>::zeroed(&[2, 4, 1], Activation::Relu, OutputHead::Linear).unwrap();
        soft_update(&mut target, &online, 1.0).unwrap();
        assert_eq!(target, online);
    }

    #[test]
    fn soft_update_midpoint() {
        let mut target =
            DenseNetwork::<f64>::zeroed(&[1, 1], Activation::Relu, OutputHead::Linear).unwrap();
        let mut online =
            DenseNetwork::<f64>::zeroed(&[1, 1], Activation::Relu, OutputHead::Linear).unwrap();
        online.set_weight(0, 0, 0, 2.0);
        soft_update(&mut target, &online, 0.5).unwrap();
        assert_eq!(target.param(0), 1.0, "tau = 0.5 from 0 toward 2 lands at 1");
    }

    #[test]
    fn repeated_soft_updates_decay_geometrically() {
        // Constant online value 1, target from 0: after k updates the gap
        // to the online network is (1 - tau)^k.
        let tau = 0.005f64;
        let mut target =
            DenseNetwork::<f64>::zeroed(&[1, 1], Activation::Relu, OutputHead::Linear).unwrap();
        let mut online =
            DenseNetwork::<f64>::zeroed(&[1, 1], Activation::Relu, OutputHead::Linear).unwrap();
        online.set_weight(0, 0, 0, 1.0);
        for _ in 0..10 {
            soft_update(&mut target, &online, tau).unwrap();
        }
        let expected = 1.0 - (1.0 - tau).powi(10);
        assert!(
            (target.param(0) - expected).abs() < 1e-15,
            "target {} vs geometric value {expected}",
            target.param(0)
        );
    }

    #[test]
    fn soft_update_rejects_architecture_mismatch() {
        let mut target =
            DenseNetwork::<f64>::zeroed(&[2, 3], Activation::Relu, OutputHead::Linear).unwrap();
        let online =
            DenseNetwork::<f64>::zeroed(&[2, 4], Activation::Relu, OutputHead::Linear).unwrap();
        assert!(matches!(
            soft_update(&mut target, &online, 0.5),
            Err(NnError::ArchitectureMismatch { .. })
        ));
    }

    #[test]
    fn backward_rejects_mismatched_cache() {
        let mut rng = seeded_stream(13, 10);
        let net =
            DenseNetwork::<f64>::new(&[2, 3, 1], Activation::Relu, OutputHead::Linear, &mut rng)
                .unwrap();
        let other =
            DenseNetwork::<f64>::new(&[4, 5, 1], Activation::Relu, OutputHead::Linear, &mut rng)
                .unwrap();
        let (_, cache) = other.forward_cached(&[0.1, 0.2, 0.3, 0.4]).unwrap();
        assert!(matches!(
            net.backward(&cache, &[1.0]),
            Err(NnError::CacheShape { .. })
        ));
    }

    #[test]
    fn init_respects_fan_in_bounds() {
        let mut rng = seeded_stream(14, 11);
        let net =
            DenseNetwork::<f64>::new(&[16, 8, 4], Activation::Relu, OutputHead::Linear, &mut rng)
                .unwrap();
        let bounds = [1.0 / 4.0, 1.0 / (8.0f64).sqrt()];
        for (layer, bound) in net.layers.iter().zip(bounds) {
            for &w in layer.weights.iter().chain(layer.biases.iter()) {
                assert!(w.abs() <= bound, "weight {w} exceeds fan-in bound {bound}");
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_identical() {
        let mut rng = seeded_stream(15, 12);
        let net =
            DenseNetwork::<f64>::new(&[4, 8, 6], Activation::Tanh, OutputHead::Gaussian, &mut rng)
                .unwrap();
        let json = serde_json::to_string(&net).unwrap();
        let restored: DenseNetwork<f64> = serde_json::from_str(&json).unwrap();
        assert_eq!(net, restored, "serialized parameters must round-trip exactly");
        let x = [0.25, -0.75, 0.5, 0.125];
        assert_eq!(net.forward(&x).unwrap(), restored.forward(&x).unwrap());
    }

    #[test]
    fn works_in_single_precision() {
        let mut rng = seeded_stream(16, 13);
        let net =
            DenseNetwork::<f32>::new(&[3, 5, 2], Activation::Tanh, OutputHead::Linear, &mut rng)
                .unwrap();
        let y = net.forward(&[0.1f32, 0.2, 0.3]).unwrap();
        assert_eq!(y.len(), 2);
        assert!(y.iter().all(|v| v.is_finite()));
    }
}
