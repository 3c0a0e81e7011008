use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::vector::{FlatVector, GradientVector, Layout, ParamVector, TensorSlot};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

/// Architecture of a fully connected classifier. An empty `hidden_dims`
/// gives multinomial logistic regression.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    #[serde(default)]
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub init_seed: u64,
}

impl ModelSpec {
    pub fn logistic(input_dim: usize, num_classes: usize, init_seed: u64) -> Self {
        ModelSpec {
            input_dim,
            hidden_dims: Vec::new(),
            num_classes,
            activation: Activation::Relu,
            init_seed,
        }
    }

    pub fn mlp(
        input_dim: usize,
        hidden: usize,
        num_classes: usize,
        activation: Activation,
        init_seed: u64,
    ) -> Self {
        ModelSpec {
            input_dim,
            hidden_dims: vec![hidden],
            num_classes,
            activation,
            init_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::config("input_dim must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes must be at least 2"));
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::config("hidden layer widths must be positive"));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` for every dense layer, input to output.
    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.num_classes);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }

    /// Weight matrix (`[fan_in, fan_out]`, row-major) followed by its bias,
    /// for each layer in order.
    pub fn layout(&self) -> Layout {
        let mut slots = Vec::new();
        let mut offset = 0;
        for (fan_in, fan_out) in self.layer_dims() {
            slots.push(TensorSlot {
                offset,
                shape: vec![fan_in, fan_out],
            });
            offset += fan_in * fan_out;
            slots.push(TensorSlot {
                offset,
                shape: vec![fan_out],
            });
            offset += fan_out;
        }
        Layout::new(slots)
    }
}

/// A mini-batch: row-major `rows x dim` features with one label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub features: Vec<f64>,
    pub dim: usize,
    pub labels: Vec<usize>,
    pub source_chunk: usize,
}

impl Batch {
    pub fn new(features: Vec<f64>, dim: usize, labels: Vec<usize>, source_chunk: usize) -> Result<Self> {
        if dim == 0 || labels.is_empty() || features.len() != dim * labels.len() {
            return Err(Error::Dimension(format!(
                "batch of {} labels needs {} features at dim {dim}, got {}",
                labels.len(),
                dim * labels.len(),
                features.len()
            )));
        }
        Ok(Batch {
            features,
            dim,
            labels,
            source_chunk,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// Appends every row of `other`, keeping this batch's provenance.
    pub fn extend_from(&mut self, other: &Batch) {
        debug_assert_eq!(self.dim, other.dim);
        self.features.extend_from_slice(&other.features);
        self.labels.extend_from_slice(&other.labels);
    }
}

/// Scaled-uniform initialization: weights in `±1/sqrt(fan_in)`, zero biases.
pub fn init_params(spec: &ModelSpec) -> Result<ParamVector> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.init_seed);
    let mut values = Vec::with_capacity(spec.param_count());
    for (fan_in, fan_out) in spec.layer_dims() {
        let bound = 1.0 / (fan_in as f64).sqrt();
        values.extend((0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)));
        values.extend(std::iter::repeat_n(0.0, fan_out));
    }
    ParamVector::new(values, spec.layout())
}

fn check_inputs(params: &[f64], batch: &Batch, spec: &ModelSpec) -> Result<()> {
    spec.validate()?;
    if params.len() != spec.param_count() {
        return Err(Error::Layout {
            expected: spec.param_count(),
            actual: params.len(),
        });
    }
    if batch.dim != spec.input_dim {
        return Err(Error::Dimension(format!(
            "batch dim {} does not match model input_dim {}",
            batch.dim, spec.input_dim
        )));
    }
    if batch.is_empty() || batch.features.len() != batch.len() * batch.dim {
        return Err(Error::Dimension("batch must hold at least one complete row".into()));
    }
    if let Some(&bad) = batch.labels.iter().find(|&&y| y >= spec.num_classes) {
        return Err(Error::Dimension(format!(
            "label {bad} out of range for {} classes",
            spec.num_classes
        )));
    }
    Ok(())
}

struct Dense {
    weight: usize,
    bias: usize,
    fan_in: usize,
    fan_out: usize,
}

fn dense_layers(spec: &ModelSpec) -> Vec<Dense> {
    let mut offset = 0;
    spec.layer_dims()
        .into_iter()
        .map(|(fan_in, fan_out)| {
            let layer = Dense {
                weight: offset,
                bias: offset + fan_in * fan_out,
                fan_in,
                fan_out,
            };
            offset += fan_in * fan_out + fan_out;
            layer
        })
        .collect()
}

/// `out = input · W + b` for `rows` rows.
fn affine(params: &[f64], layer: &Dense, input: &[f64], rows: usize) -> Vec<f64> {
    let w = &params[layer.weight..layer.bias];
    let b = &params[layer.bias..layer.bias + layer.fan_out];
    let mut out = Vec::with_capacity(rows * layer.fan_out);
    for r in 0..rows {
        out.extend_from_slice(b);
        let dst = &mut out[r * layer.fan_out..];
        let x = &input[r * layer.fan_in..(r + 1) * layer.fan_in];
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let w_row = &w[i * layer.fan_out..(i + 1) * layer.fan_out];
            for (d, &wij) in dst.iter_mut().zip(w_row) {
                *d += xi * wij;
            }
        }
    }
    out
}

/// Forward pass keeping every pre-activation and activation.
struct Trace {
    /// `activations[0]` is the input; `activations[l + 1]` is the output of hidden layer `l`.
    activations: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    logits: Vec<f64>,
}

fn forward(params: &[f64], features: &[f64], rows: usize, spec: &ModelSpec) -> Trace {
    let layers = dense_layers(spec);
    let mut activations = vec![features.to_vec()];
    let mut pre = Vec::with_capacity(layers.len());
    for (l, layer) in layers.iter().enumerate() {
        let z = affine(params, layer, activations.last().expect("input present"), rows);
        if l + 1 < layers.len() {
            activations.push(z.iter().map(|&v| spec.activation.apply(v)).collect());
        }
        pre.push(z);
    }
    let logits = pre.last().expect("at least one layer").clone();
    Trace {
        activations,
        pre,
        logits,
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Raw class scores, row-major `rows x num_classes`.
pub fn logits(params: &ParamVector, batch: &Batch, spec: &ModelSpec) -> Result<Vec<f64>> {
    check_inputs(params.values(), batch, spec)?;
    Ok(forward(params.values(), &batch.features, batch.len(), spec).logits)
}

/// Argmax class per row.
pub fn predict(params: &ParamVector, batch: &Batch, spec: &ModelSpec) -> Result<Vec<usize>> {
    let scores = logits(params, batch, spec)?;
    Ok(scores
        .chunks(spec.num_classes)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (k, &v)| if v > best.1 { (k, v) } else { best })
                .0
        })
        .collect())
}

/// Mean cross-entropy of the batch.
pub fn loss(params: &ParamVector, batch: &Batch, spec: &ModelSpec) -> Result<f64> {
    loss_raw(params.values(), batch, spec)
}

fn loss_raw(params: &[f64], batch: &Batch, spec: &ModelSpec) -> Result<f64> {
    check_inputs(params, batch, spec)?;
    let trace = forward(params, &batch.features, batch.len(), spec);
    let total: f64 = trace
        .logits
        .chunks(spec.num_classes)
        .zip(&batch.labels)
        .map(|(row, &y)| log_sum_exp(row) - row[y])
        .sum();
    let mean = total / batch.len() as f64;
    if !mean.is_finite() {
        return Err(Error::NonFinite("loss"));
    }
    Ok(mean)
}

/// Mean cross-entropy and its analytic gradient.
pub fn forward_backward(
    params: &ParamVector,
    batch: &Batch,
    spec: &ModelSpec,
) -> Result<(f64, GradientVector)> {
    let w = params.values();
    check_inputs(w, batch, spec)?;
    let rows = batch.len();
    let classes = spec.num_classes;
    let trace = forward(w, &batch.features, rows, spec);

    let scale = 1.0 / rows as f64;
    let mut total = 0.0;
    let mut delta = vec![0.0; rows * classes];
    for (r, (row, &y)) in trace.logits.chunks(classes).zip(&batch.labels).enumerate() {
        let lse = log_sum_exp(row);
        total += lse - row[y];
        let d = &mut delta[r * classes..(r + 1) * classes];
        for (k, (dk, &zk)) in d.iter_mut().zip(row).enumerate() {
            let p = (zk - lse).exp();
            *dk = (p - if k == y { 1.0 } else { 0.0 }) * scale;
        }
    }
    let mean_loss = total * scale;
    if !mean_loss.is_finite() {
        return Err(Error::NonFinite("forward_backward"));
    }

    let layers = dense_layers(spec);
    let mut grad = vec![0.0; w.len()];
    for (l, layer) in layers.iter().enumerate().rev() {
        let input = &trace.activations[l];
        let (fan_in, fan_out) = (layer.fan_in, layer.fan_out);
        {
            let (gw, gb) = grad[layer.weight..layer.bias + fan_out].split_at_mut(fan_in * fan_out);
            for r in 0..rows {
                let d = &delta[r * fan_out..(r + 1) * fan_out];
                for (b, &dv) in gb.iter_mut().zip(d) {
                    *b += dv;
                }
                let x = &input[r * fan_in..(r + 1) * fan_in];
                for (i, &xi) in x.iter().enumerate() {
                    if xi == 0.0 {
                        continue;
                    }
                    for (g, &dv) in gw[i * fan_out..(i + 1) * fan_out].iter_mut().zip(d) {
                        *g += xi * dv;
                    }
                }
            }
        }
        if l == 0 {
            break;
        }
        // propagate into the previous hidden layer
        let weights = &w[layer.weight..layer.bias];
        let z_prev = &trace.pre[l - 1];
        let a_prev = &trace.activations[l];
        let mut next = vec![0.0; rows * fan_in];
        for r in 0..rows {
            let d = &delta[r * fan_out..(r + 1) * fan_out];
            for i in 0..fan_in {
                let w_row = &weights[i * fan_out..(i + 1) * fan_out];
                let back: f64 = w_row.iter().zip(d).map(|(a, b)| a * b).sum();
                let idx = r * fan_in + i;
                next[idx] = back * spec.activation.derivative(z_prev[idx], a_prev[idx]);
            }
        }
        delta = next;
    }

    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("forward_backward"));
    }
    Ok((mean_loss, GradientVector::new(grad, params.layout().clone())?))
}

/// Central-difference estimate of the mean-loss gradient, one coordinate at a time.
pub fn finite_diff_grad(
    params: &ParamVector,
    batch: &Batch,
    spec: &ModelSpec,
    eps: f64,
) -> Result<GradientVector> {
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::config(format!("finite-difference eps must lie in (0, 1e-2], got {eps}")));
    }
    let mut probe = params.values().to_vec();
    let mut grad = Vec::with_capacity(probe.len());
    for i in 0..probe.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let up = loss_raw(&probe, batch, spec)?;
        probe[i] = orig - eps;
        let down = loss_raw(&probe, batch, spec)?;
        probe[i] = orig;
        grad.push((up - down) / (2.0 * eps));
    }
    GradientVector::new(grad, params.layout().clone())
}
