//! A small fully connected ReLU network with exact per-example backprop.
//!
//! Parameters are flattened layer by layer: the weight matrix in row-major
//! `[out][in]` order, then the bias vector.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{DroError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossKind {
    /// `−log softmax(h(x))[y]` for a class index `y`.
    CrossEntropySoftmax,
    /// `½ ‖h(x) − y‖²` for a target vector `y`.
    SquaredError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Target {
    Class(usize),
    Vector(Vec<f64>),
}

impl Target {
    /// Class used for accuracy: the index itself, or the argmax of a vector.
    pub fn class(&self) -> usize {
        match self {
            Target::Class(c) => *c,
            Target::Vector(v) => argmax(v),
        }
    }
}

/// Labelled examples.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<Target>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn classification(
        inputs: Vec<Vec<f64>>,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(DroError::arg(format!(
                "{} inputs but {} labels",
                inputs.len(),
                labels.len()
            )));
        }
        if let Some(&c) = labels.iter().find(|&&c| c >= num_classes) {
            return Err(DroError::arg(format!("label {c} >= {num_classes} classes")));
        }
        if let Some(dim) = inputs.first().map(Vec::len) {
            if inputs.iter().any(|x| x.len() != dim) {
                return Err(DroError::arg("inputs have inconsistent dimensions"));
            }
        }
        Ok(Self {
            inputs,
            targets: labels.into_iter().map(Target::Class).collect(),
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.first().map_or(0, Vec::len)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for t in &self.targets {
            counts[t.class()] += 1;
        }
        counts
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Row-major `[out_dim][in_dim]`.
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl DenseLayer {
    fn affine(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.in_dim)
            .zip(&self.biases)
            .map(|(row, b)| b + row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>())
            .collect()
    }

    fn param_count(&self) -> usize {
        self.weights.len() + self.biases.len()
    }
}

/// Fully connected network, ReLU on hidden layers, identity on the output.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    layer_dims: Vec<usize>,
    layers: Vec<DenseLayer>,
}

/// Flattened gradient of one example's loss.
#[derive(Debug, Clone, PartialEq)]
pub struct PerExampleGrad {
    pub values: Vec<f64>,
    pub example_index: usize,
}

fn check_dims(layer_dims: &[usize]) -> Result<()> {
    if layer_dims.len() < 2 || layer_dims.contains(&0) {
        return Err(DroError::arg(format!(
            "need at least two positive layer dimensions, got {layer_dims:?}"
        )));
    }
    Ok(())
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

impl MlpModel {
    /// He-style initialisation: hidden weights `N(0, 2/fan_in)`, output
    /// weights `N(0, 1/d_out)`, zero biases.
    pub fn init(layer_dims: &[usize], seed: u64) -> Result<Self> {
        check_dims(layer_dims)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let last = layer_dims.len() - 2;
        let d_out = *layer_dims.last().unwrap();
        let layers = layer_dims
            .windows(2)
            .enumerate()
            .map(|(l, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let var = if l == last {
                    1.0 / d_out as f64
                } else {
                    2.0 / fan_in as f64
                };
                let normal = Normal::new(0.0, var.sqrt()).expect("positive variance");
                DenseLayer {
                    in_dim: fan_in,
                    out_dim: fan_out,
                    weights: (0..fan_in * fan_out)
                        .map(|_| normal.sample(&mut rng))
                        .collect(),
                    biases: vec![0.0; fan_out],
                }
            })
            .collect();
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            layers,
        })
    }

    /// Builds a model from explicit `(weights, biases)` per layer.
    pub fn from_layers(layer_dims: &[usize], params: Vec<(Vec<f64>, Vec<f64>)>) -> Result<Self> {
        check_dims(layer_dims)?;
        if params.len() != layer_dims.len() - 1 {
            return Err(DroError::arg(format!(
                "{} layers given for dims {layer_dims:?}",
                params.len()
            )));
        }
        let mut layers = Vec::with_capacity(params.len());
        for (w, (weights, biases)) in layer_dims.windows(2).zip(params) {
            if weights.len() != w[0] * w[1] || biases.len() != w[1] {
                return Err(DroError::arg(format!(
                    "layer {}x{} given {} weights and {} biases",
                    w[1],
                    w[0],
                    weights.len(),
                    biases.len()
                )));
            }
            if weights.iter().chain(&biases).any(|v| !v.is_finite()) {
                return Err(DroError::arg("non-finite parameter"));
            }
            layers.push(DenseLayer {
                in_dim: w[0],
                out_dim: w[1],
                weights,
                biases,
            });
        }
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            layers,
        })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(DenseLayer::param_count).sum()
    }

    pub fn parameters(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            out.extend_from_slice(&layer.weights);
            out.extend_from_slice(&layer.biases);
        }
        out
    }

    pub fn set_parameters(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(DroError::arg(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            let nw = layer.weights.len();
            layer.weights.copy_from_slice(&flat[offset..offset + nw]);
            offset += nw;
            let nb = layer.biases.len();
            layer.biases.copy_from_slice(&flat[offset..offset + nb]);
            offset += nb;
        }
        Ok(())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(DroError::arg(format!(
                "input has dimension {}, model expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    fn check_target(&self, y: &Target, kind: LossKind) -> Result<()> {
        let d_out = self.output_dim();
        match (kind, y) {
            (LossKind::CrossEntropySoftmax, Target::Class(c)) if *c < d_out => Ok(()),
            (LossKind::SquaredError, Target::Vector(v)) if v.len() == d_out => Ok(()),
            _ => Err(DroError::arg(format!(
                "target {y:?} is not valid for {kind:?} with {d_out} outputs"
            ))),
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut a = x.to_vec();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            a = layer.affine(&a);
            if l != last {
                a.iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
        Ok(a)
    }

    /// Index of the largest output.
    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.forward(x)?))
    }

    pub fn per_example_loss(&self, x: &[f64], y: &Target, kind: LossKind) -> Result<f64> {
        self.check_target(y, kind)?;
        let out = self.forward(x)?;
        Ok(loss_and_output_grad(&out, y, kind).0)
    }

    /// Loss and flattened gradient in one forward/backward pass.
    pub fn loss_and_gradient(
        &self,
        x: &[f64],
        y: &Target,
        kind: LossKind,
    ) -> Result<(f64, Vec<f64>)> {
        self.check_target(y, kind)?;
        self.check_input(x)?;

        // activations[l] is the input of layer l; pre[l] its affine output
        let mut activations = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let last = self.layers.len() - 1;
        let mut a = x.to_vec();
        for (l, layer) in self.layers.iter().enumerate() {
            let z = layer.affine(&a);
            activations.push(a);
            a = if l == last {
                z.clone()
            } else {
                z.iter().map(|v| v.max(0.0)).collect()
            };
            pre.push(z);
        }

        let (loss, mut delta) = loss_and_output_grad(&a, y, kind);

        let mut grads: Vec<Vec<f64>> = vec![Vec::new(); self.layers.len()];
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let input = &activations[l];
            let mut g = Vec::with_capacity(layer.param_count());
            for &d in &delta {
                g.extend(input.iter().map(|&xi| d * xi));
            }
            g.extend_from_slice(&delta);
            grads[l] = g;

            if l > 0 {
                let z_prev = &pre[l - 1];
                let mut back = vec![0.0; layer.in_dim];
                for (row, &d) in layer.weights.chunks_exact(layer.in_dim).zip(&delta) {
                    for (b, w) in back.iter_mut().zip(row) {
                        *b += w * d;
                    }
                }
                // ReLU'(z) = 1 for z > 0, else 0 (including the kink)
                for (b, &z) in back.iter_mut().zip(z_prev) {
                    if z <= 0.0 {
                        *b = 0.0;
                    }
                }
                delta = back;
            }
        }
        Ok((loss, grads.concat()))
    }

    pub fn per_example_gradient(
        &self,
        x: &[f64],
        y: &Target,
        kind: LossKind,
        example_index: usize,
    ) -> Result<PerExampleGrad> {
        let (_, values) = self.loss_and_gradient(x, y, kind)?;
        Ok(PerExampleGrad {
            values,
            example_index,
        })
    }
}

/// Loss value and its gradient with respect to the network output.
fn loss_and_output_grad(out: &[f64], y: &Target, kind: LossKind) -> (f64, Vec<f64>) {
    match (kind, y) {
        (LossKind::CrossEntropySoftmax, Target::Class(c)) => {
            let max = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = out.iter().map(|&o| (o - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            let loss = ce_loss(out, *c);
            let mut grad: Vec<f64> = exps.iter().map(|e| e / total).collect();
            grad[*c] -= 1.0;
            (loss, grad)
        }
        (LossKind::SquaredError, Target::Vector(t)) => {
            let diff: Vec<f64> = out.iter().zip(t).map(|(o, t)| o - t).collect();
            let loss = 0.5 * diff.iter().map(|d| d * d).sum::<f64>();
            (loss, diff)
        }
        _ => unreachable!("target validated by caller"),
    }
}

/// `log Σₖ exp(oₖ − o_c)`. When `c` is the arg-max the loss is taken from
/// `ln_1p` so a confident correct prediction keeps full precision.
fn ce_loss(out: &[f64], c: usize) -> f64 {
    let shift = out.iter().map(|&o| o - out[c]).fold(0.0f64, f64::max);
    if shift == 0.0 {
        let rest: f64 = out
            .iter()
            .enumerate()
            .filter(|&(k, _)| k != c)
            .map(|(_, &o)| (o - out[c]).exp())
            .sum();
        rest.ln_1p()
    } else {
        shift
            + out
                .iter()
                .map(|&o| (o - out[c] - shift).exp())
                .sum::<f64>()
                .ln()
    }
}

/// Convenience wrapper around [`MlpModel::init`].
pub fn init_model(layer_dims: &[usize], seed: u64) -> Result<MlpModel> {
    MlpModel::init(layer_dims, seed)
}

/// `(1/b) Σ wᵢ ∇θ 𝓛(h(xᵢ), yᵢ)`, reduced in batch order.
pub fn weighted_batch_gradient(
    model: &MlpModel,
    inputs: &[&[f64]],
    targets: &[&Target],
    weights: &[f64],
    kind: LossKind,
) -> Result<Vec<f64>> {
    if inputs.len() != targets.len() || inputs.len() != weights.len() {
        return Err(DroError::arg(format!(
            "batch lengths disagree: {} inputs, {} targets, {} weights",
            inputs.len(),
            targets.len(),
            weights.len()
        )));
    }
    let grads = inputs
        .iter()
        .zip(targets)
        .map(|(x, y)| model.loss_and_gradient(x, y, kind).map(|(_, g)| g))
        .collect::<Result<Vec<_>>>()?;
    Ok(combine_weighted(model.param_count(), &grads, weights))
}

pub(crate) fn combine_weighted(
    param_count: usize,
    grads: &[Vec<f64>],
    weights: &[f64],
) -> Vec<f64> {
    let mut out = vec![0.0; param_count];
    if grads.is_empty() {
        return out;
    }
    let scale = 1.0 / grads.len() as f64;
    for (g, &w) in grads.iter().zip(weights) {
        for (o, gi) in out.iter_mut().zip(g) {
            *o += w * gi;
        }
    }
    out.iter_mut().for_each(|o| *o *= scale);
    out
}
