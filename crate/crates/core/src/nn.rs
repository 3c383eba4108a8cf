//! Dense feed-forward networks with a hand-written backward pass, the Adam
//! optimizer, and the JSON model format shared by λ-nets and I-Net trunks.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sigmoid,
    /// `1 / (1 + e^(-3x))`, pushes split values away from 0.5.
    SqueezedSigmoid,
    Softmax,
    Swish,
    Linear,
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn squeezed_sigmoid(x: f64) -> f64 {
    sigmoid(3.0 * x)
}

/// Scalar activation. Softmax over a single value is 1.
pub fn activate(kind: Activation, x: f64) -> f64 {
    match kind {
        Activation::Relu => x.max(0.0),
        Activation::Sigmoid => sigmoid(x),
        Activation::SqueezedSigmoid => squeezed_sigmoid(x),
        Activation::Softmax => 1.0,
        Activation::Swish => x * sigmoid(x),
        Activation::Linear => x,
    }
}

/// In-place softmax over a slice.
pub fn softmax_in_place(values: &mut [f64]) {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in values.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in values.iter_mut() {
        *v /= sum;
    }
}

/// Gradient through a softmax block: `s ⊙ (g − ⟨s, g⟩)`.
pub fn softmax_backward(probs: &[f64], upstream: &[f64], out: &mut [f64]) {
    let dot: f64 = probs.iter().zip(upstream).map(|(s, g)| s * g).sum();
    for ((o, s), g) in out.iter_mut().zip(probs).zip(upstream) {
        *o = s * (g - dot);
    }
}

fn apply_activation(kind: Activation, z: &Array2<f64>) -> Array2<f64> {
    match kind {
        Activation::Softmax => {
            let mut a = z.clone();
            for mut row in a.rows_mut() {
                softmax_in_place(row.as_slice_mut().expect("standard layout"));
            }
            a
        }
        k => z.mapv(|x| activate(k, x)),
    }
}

fn activation_backward(kind: Activation, z: &Array2<f64>, a: &Array2<f64>, upstream: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(z.raw_dim());
    match kind {
        Activation::Linear => out.assign(upstream),
        Activation::Relu => Zip::from(&mut out)
            .and(z)
            .and(upstream)
            .for_each(|o, &z, &g| *o = if z > 0.0 { g } else { 0.0 }),
        Activation::Sigmoid => Zip::from(&mut out)
            .and(a)
            .and(upstream)
            .for_each(|o, &a, &g| *o = g * a * (1.0 - a)),
        Activation::SqueezedSigmoid => Zip::from(&mut out)
            .and(a)
            .and(upstream)
            .for_each(|o, &a, &g| *o = g * 3.0 * a * (1.0 - a)),
        Activation::Swish => Zip::from(&mut out).and(z).and(upstream).for_each(|o, &z, &g| {
            let s = sigmoid(z);
            *o = g * (s + z * s * (1.0 - s));
        }),
        Activation::Softmax => {
            for ((mut o, a), g) in out.rows_mut().into_iter().zip(a.rows()).zip(upstream.rows()) {
                softmax_backward(
                    a.as_slice().expect("standard layout"),
                    g.as_slice().expect("standard layout"),
                    o.as_slice_mut().expect("standard layout"),
                );
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `[fan_in × fan_out]`
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl Dense {
    pub fn fan_in(&self) -> usize {
        self.weights.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.weights.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    layers: Vec<Dense>,
    /// Dropout rate applied to each layer's output while training.
    dropout: Vec<f64>,
}

/// Everything the backward pass needs from one training-mode forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    post: Vec<Array2<f64>>,
    masks: Vec<Option<Array2<f64>>>,
}

/// Per-layer parameter gradients, in layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<(Array2<f64>, Array1<f64>)>,
}

impl Gradients {
    pub fn blocks(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|(w, b)| {
                [
                    w.as_slice().expect("standard layout"),
                    b.as_slice().expect("standard layout"),
                ]
            })
            .collect()
    }

    /// Flattened in the same order as [`DenseNet::flatten`].
    pub fn flatten(&self) -> Vec<f64> {
        self.blocks().concat()
    }
}

impl DenseNet {
    pub fn new(layers: Vec<Dense>, dropout: Vec<f64>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("layers", "a network needs at least one layer"));
        }
        if dropout.len() != layers.len() {
            return Err(Error::invalid(
                "dropout",
                format!("{} rates for {} layers", dropout.len(), layers.len()),
            ));
        }
        for (i, rate) in dropout.iter().enumerate() {
            if !(0.0..1.0).contains(rate) {
                return Err(Error::invalid(format!("dropout[{i}]"), "rate must lie in [0, 1)"));
            }
        }
        for (i, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.fan_out() {
                return Err(Error::invalid(
                    format!("layers[{i}].bias"),
                    format!("length {} != fan_out {}", layer.bias.len(), layer.fan_out()),
                ));
            }
            if i > 0 && layers[i - 1].fan_out() != layer.fan_in() {
                return Err(Error::ShapeMismatch {
                    layer: i,
                    expected: layers[i - 1].fan_out(),
                    actual: layer.fan_in(),
                });
            }
            if layer.weights.iter().chain(layer.bias.iter()).any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("layers[{i}]"), "non-finite parameter"));
            }
        }
        Ok(Self { layers, dropout })
    }

    /// Glorot-uniform weights (±sqrt(6 / (fan_in + fan_out))), zero biases.
    /// `sizes` lists input width then every layer width.
    pub fn init<R: Rng + ?Sized>(
        sizes: &[usize],
        activations: &[Activation],
        dropout: &[f64],
        rng: &mut R,
    ) -> Result<Self> {
        if sizes.len() != activations.len() + 1 {
            return Err(Error::invalid(
                "activations",
                format!(
                    "{} activations for {} layers",
                    activations.len(),
                    sizes.len().saturating_sub(1)
                ),
            ));
        }
        let layers = sizes
            .windows(2)
            .zip(activations)
            .map(|(w, &activation)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let weights = Array2::from_shape_simple_fn((fan_in, fan_out), || rng.random_range(-limit..=limit));
                Dense {
                    weights,
                    bias: Array1::zeros(fan_out),
                    activation,
                }
            })
            .collect();
        Self::new(layers, dropout.to_vec())
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn dropout(&self) -> &[f64] {
        &self.dropout
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].fan_out()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::ShapeMismatch {
                layer: 0,
                expected: self.input_dim(),
                actual: x.ncols(),
            });
        }
        Ok(())
    }

    /// Inference pass; dropout is inactive.
    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        let mut a = x.to_owned();
        for layer in &self.layers {
            let z = a.dot(&layer.weights) + &layer.bias;
            a = apply_activation(layer.activation, &z);
        }
        Ok(a)
    }

    /// Training-mode pass. Dropout is applied (inverted scaling) only when a
    /// generator is supplied.
    pub fn forward_train<R: Rng + ?Sized>(
        &self,
        x: ArrayView2<f64>,
        mut dropout_rng: Option<&mut R>,
    ) -> Result<(Array2<f64>, ForwardCache)> {
        self.check_input(&x)?;
        let mut cache = ForwardCache {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len()),
            post: Vec::with_capacity(self.layers.len()),
            masks: Vec::with_capacity(self.layers.len()),
        };
        let mut a = x.to_owned();
        for (layer, &rate) in self.layers.iter().zip(&self.dropout) {
            let z = a.dot(&layer.weights) + &layer.bias;
            let post = apply_activation(layer.activation, &z);
            let mask = match dropout_rng.as_deref_mut() {
                Some(rng) if rate > 0.0 => {
                    let keep = 1.0 / (1.0 - rate);
                    Some(Array2::from_shape_simple_fn(post.raw_dim(), || {
                        if rng.random::<f64>() < rate {
                            0.0
                        } else {
                            keep
                        }
                    }))
                }
                _ => None,
            };
            let out = match &mask {
                Some(m) => &post * m,
                None => post.clone(),
            };
            cache.inputs.push(std::mem::replace(&mut a, out));
            cache.pre.push(z);
            cache.post.push(post);
            cache.masks.push(mask);
        }
        Ok((a, cache))
    }

    /// Parameter gradients given ∂loss/∂output for the batch in `cache`.
    pub fn backward(&self, cache: &ForwardCache, upstream: &Array2<f64>) -> Result<Gradients> {
        if cache.pre.len() != self.layers.len() {
            return Err(Error::CacheMismatch(format!(
                "cache has {} layers, network has {}",
                cache.pre.len(),
                self.layers.len()
            )));
        }
        for (i, (layer, z)) in self.layers.iter().zip(&cache.pre).enumerate() {
            if z.ncols() != layer.fan_out() {
                return Err(Error::CacheMismatch(format!("layer {i} width differs")));
            }
        }
        let last = &cache.pre[cache.pre.len() - 1];
        if upstream.dim() != last.dim() {
            return Err(Error::CacheMismatch(format!(
                "upstream gradient {:?} vs output {:?}",
                upstream.dim(),
                last.dim()
            )));
        }

        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = upstream.clone();
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            if let Some(mask) = &cache.masks[i] {
                delta *= mask;
            }
            let dz = activation_backward(layer.activation, &cache.pre[i], &cache.post[i], &delta);
            let dw = cache.inputs[i].t().dot(&dz);
            let db = dz.sum_axis(Axis(0));
            if i > 0 {
                delta = dz.dot(&layer.weights.t());
            }
            grads.push((dw, db));
        }
        grads.reverse();
        Ok(Gradients { layers: grads })
    }

    /// Mutable parameter blocks in flatten order (weights then bias, per layer).
    pub fn param_blocks_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                [
                    l.weights.as_slice_mut().expect("standard layout"),
                    l.bias.as_slice_mut().expect("standard layout"),
                ]
            })
            .collect()
    }

    /// Layer by layer: weight matrix row-major, then the bias vector.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend(l.weights.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    /// Inverse of [`flatten`](Self::flatten) for this network's shapes.
    pub fn unflatten(&self, theta: &[f64]) -> Result<Self> {
        if theta.len() != self.param_count() {
            return Err(Error::Dimension {
                expected: self.param_count(),
                actual: theta.len(),
            });
        }
        let mut net = self.clone();
        let mut rest = theta;
        for block in net.param_blocks_mut() {
            let (head, tail) = rest.split_at(block.len());
            block.copy_from_slice(head);
            rest = tail;
        }
        Ok(net)
    }

    pub fn to_document(&self) -> ModelDocument {
        ModelDocument {
            format_version: MODEL_FORMAT_VERSION,
            layers: self
                .layers
                .iter()
                .map(|l| LayerDocument {
                    fan_in: l.fan_in(),
                    fan_out: l.fan_out(),
                    activation: l.activation,
                    weights: l.weights.iter().copied().collect(),
                    bias: l.bias.to_vec(),
                })
                .collect(),
            dropout: self.dropout.clone(),
        }
    }

    pub fn from_document(doc: ModelDocument) -> Result<Self> {
        if doc.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::FormatVersion {
                found: doc.format_version,
                expected: MODEL_FORMAT_VERSION,
            });
        }
        let layers = doc
            .layers
            .into_iter()
            .enumerate()
            .map(|(i, l)| {
                let weights = Array2::from_shape_vec((l.fan_in, l.fan_out), l.weights)
                    .map_err(|_| Error::invalid(format!("layers[{i}].weights"), "length != fan_in * fan_out"))?;
                Ok(Dense {
                    weights,
                    bias: Array1::from(l.bias),
                    activation: l.activation,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers, doc.dropout)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.to_document())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_document(serde_json::from_str(text)?)
    }
}

/// Versioned on-disk model layout. Weights are row-major `[fan_in × fan_out]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDocument {
    pub format_version: u32,
    pub layers: Vec<LayerDocument>,
    pub dropout: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDocument {
    pub fan_in: usize,
    pub fan_out: usize,
    pub activation: Activation,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Self::with_moments(learning_rate, 0.9, 0.999, 1e-7)
    }

    pub fn with_moments(learning_rate: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self {
            learning_rate,
            beta1,
            beta2,
            epsilon,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update over matching parameter/gradient blocks. Nothing is
    /// modified if any gradient entry is non-finite.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Dimension {
                expected: params.len(),
                actual: grads.len(),
            });
        }
        for (block, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() {
                return Err(Error::Dimension {
                    expected: p.len(),
                    actual: g.len(),
                });
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient { block });
            }
        }
        if self.first.is_empty() {
            self.first = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.second = self.first.clone();
        } else if self.first.len() != grads.len() || self.first.iter().zip(grads).any(|(m, g)| m.len() != g.len()) {
            return Err(Error::invalid("adam", "parameter shapes changed between steps"));
        }

        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.learning_rate, self.epsilon);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut())
            .zip(self.second.iter_mut())
        {
            for i in 0..g.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Mean binary cross-entropy of sigmoid outputs and its gradient w.r.t. the
/// outputs. Probabilities are clamped to `[1e-7, 1 - 1e-7]`; the gradient is
/// zero where the clamp is active.
pub fn bce_with_grad(probs: &Array2<f64>, targets: &[f64]) -> (f64, Array2<f64>) {
    let rows = probs.nrows() as f64;
    let mut grad = Array2::zeros(probs.raw_dim());
    let mut loss = 0.0;
    for (i, (&p, &t)) in probs.iter().zip(targets).enumerate() {
        let (l, d) = clamped_bce(p, t);
        loss += l;
        grad[[i, 0]] = d / rows;
    }
    (loss / rows, grad)
}

pub const PROB_CLAMP: f64 = 1e-7;

/// Per-row binary cross-entropy and its derivative w.r.t. the prediction.
#[inline]
pub fn clamped_bce(p: f64, target: f64) -> (f64, f64) {
    let clamped = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let loss = -(target * clamped.ln() + (1.0 - target) * (1.0 - clamped).ln());
    let grad = if clamped != p {
        0.0
    } else {
        -target / p + (1.0 - target) / (1.0 - p)
    };
    (loss, grad)
}
