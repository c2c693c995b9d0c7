//! Feed-forward networks with two hidden layers trained by Adam on the
//! summed negative `Q` criteria. Weights carry over between EM iterations.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, ModelTarget};
use crate::error::{Error, Result};
use crate::numeric::{pairwise_sum, softmax_into};

pub const WEIGHTS_FORMAT: &str = "nowcast-mlp-weights";
pub const WEIGHTS_VERSION: u32 = 1;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
    Sigmoid,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
            Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
        }
    }

    /// Derivative expressed through the activation value `a = φ(z)`.
    #[inline]
    fn derivative(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => a * (1.0 - a),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major `outputs x inputs`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Hidden layers apply the activation; the last layer is affine.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkWeights {
    pub activation: Activation,
    pub layers: Vec<Layer>,
}

#[derive(Serialize, Deserialize)]
struct WeightsDocument {
    format: String,
    version: u32,
    weights: NetworkWeights,
}

impl NetworkWeights {
    /// All-zero network with layer widths `dims` (input first, output last).
    pub fn zeros(dims: &[usize], activation: Activation) -> Self {
        let layers = dims
            .windows(2)
            .map(|w| Layer { inputs: w[0], outputs: w[1], weights: vec![0.0; w[0] * w[1]], bias: vec![0.0; w[1]] })
            .collect();
        Self { activation, layers }
    }

    /// Glorot-uniform weights, zero biases, output bias set to `output_bias`.
    pub fn glorot<R: Rng>(dims: &[usize], activation: Activation, output_bias: &[f64], rng: &mut R) -> Self {
        let mut net = Self::zeros(dims, activation);
        for layer in &mut net.layers {
            let limit = (6.0 / (layer.inputs + layer.outputs) as f64).sqrt();
            for w in &mut layer.weights {
                *w = rng.random_range(-limit..=limit);
            }
        }
        net.layers.last_mut().unwrap().bias.copy_from_slice(output_bias);
        net
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().outputs
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Parameters in layer order, weights before biases.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_flat(&mut self, params: &[f64]) {
        let mut k = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&params[k..k + nw]);
            k += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&params[k..k + nb]);
            k += nb;
        }
    }

    fn check_shape(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Data("network without layers".into()));
        }
        for (k, l) in self.layers.iter().enumerate() {
            if l.weights.len() != l.inputs * l.outputs || l.bias.len() != l.outputs {
                return Err(Error::Data(format!("layer {k} has inconsistent dimensions")));
            }
            if k > 0 && self.layers[k - 1].outputs != l.inputs {
                return Err(Error::Data(format!("layer {k} input width does not match layer {}", k - 1)));
            }
            if l.weights.iter().chain(&l.bias).any(|v| !v.is_finite()) {
                return Err(Error::Data(format!("layer {k} holds non-finite values")));
            }
        }
        Ok(())
    }

    /// Activations of every layer for input `x`; `acts[0] = x`.
    fn forward_all(&self, x: &[f64], acts: &mut Vec<Vec<f64>>) {
        acts.resize(self.layers.len() + 1, Vec::new());
        acts[0].clear();
        acts[0].extend_from_slice(x);
        let last = self.layers.len() - 1;
        for (k, l) in self.layers.iter().enumerate() {
            let (head, tail) = acts.split_at_mut(k + 1);
            let input = &head[k];
            let out = &mut tail[0];
            out.clear();
            for o in 0..l.outputs {
                let row = &l.weights[o * l.inputs..(o + 1) * l.inputs];
                let z = l.bias[o] + row.iter().zip(input).map(|(w, a)| w * a).sum::<f64>();
                out.push(if k == last { z } else { self.activation.apply(z) });
            }
        }
    }

    /// Output-layer scores for one (already standardized) input row.
    pub fn forward(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        if x.len() != self.input_dim() || out.len() != self.output_dim() {
            return Err(Error::Contract(format!(
                "network maps {} -> {}, got input {} and output {}",
                self.input_dim(),
                self.output_dim(),
                x.len(),
                out.len()
            )));
        }
        let mut acts = Vec::new();
        self.forward_all(x, &mut acts);
        out.copy_from_slice(acts.last().unwrap());
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&WeightsDocument {
            format: WEIGHTS_FORMAT.into(),
            version: WEIGHTS_VERSION,
            weights: self.clone(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: WeightsDocument = serde_json::from_str(text)?;
        if doc.format != WEIGHTS_FORMAT || doc.version != WEIGHTS_VERSION {
            return Err(Error::Data(format!("unsupported weights document {} v{}", doc.format, doc.version)));
        }
        doc.weights.check_shape()?;
        Ok(doc.weights)
    }
}

/// Negative `Q` contribution of one record and its gradient in the scores.
/// Occurrence: `exp(s) - N s`. Reporting: `-Σ_j N_j ln softmax_j(s)`.
pub fn head_loss_grad(head: ModelTarget, scores: &[f64], targets: &[f64], grad: &mut [f64]) -> f64 {
    match head {
        ModelTarget::Occurrence => {
            let mu = scores[0].exp();
            grad[0] = mu - targets[0];
            mu - targets[0] * scores[0]
        }
        ModelTarget::Reporting => {
            softmax_into(scores, grad);
            let total: f64 = targets.iter().sum();
            let mut loss = 0.0;
            for j in 0..scores.len() {
                if targets[j] != 0.0 {
                    loss -= targets[j] * grad[j].ln();
                }
                grad[j] = total * grad[j] - targets[j];
            }
            loss
        }
    }
}

/// Row-major input and target matrices for one split.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSet {
    pub inputs: Vec<f64>,
    pub input_dim: usize,
    pub targets: Vec<f64>,
    pub target_dim: usize,
}

impl TrainingSet {
    pub fn len(&self) -> usize {
        self.targets.len() / self.target_dim.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    fn row(&self, i: usize) -> (&[f64], &[f64]) {
        (
            &self.inputs[i * self.input_dim..(i + 1) * self.input_dim],
            &self.targets[i * self.target_dim..(i + 1) * self.target_dim],
        )
    }
}

/// Summed loss over `rows` and (optionally) its parameter gradient.
pub fn loss_and_gradient(
    net: &NetworkWeights,
    set: &TrainingSet,
    rows: &[usize],
    head: ModelTarget,
    grad: Option<&mut [f64]>,
) -> f64 {
    let mut acts = Vec::new();
    let out_dim = net.output_dim();
    let mut dscore = vec![0.0; out_dim];
    let mut losses = Vec::with_capacity(rows.len());
    let Some(grad) = grad else {
        for &i in rows {
            let (x, y) = set.row(i);
            net.forward_all(x, &mut acts);
            losses.push(head_loss_grad(head, acts.last().unwrap(), y, &mut dscore));
        }
        return pairwise_sum(&losses);
    };
    grad.iter_mut().for_each(|g| *g = 0.0);
    let mut offsets = Vec::with_capacity(net.layers.len());
    let mut k = 0;
    for l in &net.layers {
        offsets.push(k);
        k += l.weights.len() + l.bias.len();
    }
    let mut delta: Vec<f64> = Vec::new();
    let mut prev: Vec<f64> = Vec::new();
    for &i in rows {
        let (x, y) = set.row(i);
        net.forward_all(x, &mut acts);
        losses.push(head_loss_grad(head, acts.last().unwrap(), y, &mut dscore));
        delta.clear();
        delta.extend_from_slice(&dscore);
        for (li, l) in net.layers.iter().enumerate().rev() {
            let input = &acts[li];
            let off = offsets[li];
            for o in 0..l.outputs {
                let dz = delta[o];
                if dz == 0.0 {
                    continue;
                }
                let gw = &mut grad[off + o * l.inputs..off + (o + 1) * l.inputs];
                for (g, a) in gw.iter_mut().zip(input) {
                    *g += dz * a;
                }
                grad[off + l.weights.len() + o] += dz;
            }
            if li > 0 {
                prev.clear();
                prev.resize(l.inputs, 0.0);
                for o in 0..l.outputs {
                    let dz = delta[o];
                    let row = &l.weights[o * l.inputs..(o + 1) * l.inputs];
                    for (p, w) in prev.iter_mut().zip(row) {
                        *p += dz * w;
                    }
                }
                for (p, a) in prev.iter_mut().zip(input) {
                    *p *= net.activation.derivative(*a);
                }
                std::mem::swap(&mut delta, &mut prev);
            }
        }
    }
    pairwise_sum(&losses)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainParams {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub patience: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub weights: NetworkWeights,
    pub epochs_run: usize,
    /// 0 when the incoming weights were never improved upon.
    pub best_epoch: usize,
    /// Validation loss of the incoming weights, then after every epoch.
    pub val_trace: Vec<f64>,
}

/// Mini-batch Adam on the summed loss. Validation loss is checked after every
/// epoch; the best weights seen (including the incoming ones) are returned.
pub fn train_network(
    init: &NetworkWeights,
    train: &TrainingSet,
    val: &TrainingSet,
    head: ModelTarget,
    params: TrainParams,
    seed: u64,
) -> Result<TrainOutcome> {
    if train.input_dim != init.input_dim() || train.target_dim != init.output_dim() {
        return Err(Error::Contract("training data does not match the network dimensions".into()));
    }
    if params.batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut net = init.clone();
    let val_rows: Vec<usize> = (0..val.len()).collect();
    let use_val = !val.is_empty();
    let val_loss = |n: &NetworkWeights| loss_and_gradient(n, val, &val_rows, head, None);
    let mut best = if use_val { val_loss(&net) } else { f64::INFINITY };
    let mut outcome = TrainOutcome { weights: net.clone(), epochs_run: 0, best_epoch: 0, val_trace: vec![best] };
    if params.epochs == 0 || train.is_empty() {
        return Ok(outcome);
    }

    let n_params = net.n_params();
    let mut theta = net.flatten();
    let mut m = vec![0.0; n_params];
    let mut v = vec![0.0; n_params];
    let mut grad = vec![0.0; n_params];
    let mut step: i32 = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut since_best = 0;
    for epoch in 1..=params.epochs {
        order.shuffle(&mut rng);
        for (b, batch) in order.chunks(params.batch_size).enumerate() {
            let loss = loss_and_gradient(&net, train, batch, head, Some(&mut grad));
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Numerical(format!("non-finite loss in epoch {epoch}, batch {b}")));
            }
            step += 1;
            let c1 = 1.0 - ADAM_BETA1.powi(step);
            let c2 = 1.0 - ADAM_BETA2.powi(step);
            for k in 0..n_params {
                m[k] = ADAM_BETA1 * m[k] + (1.0 - ADAM_BETA1) * grad[k];
                v[k] = ADAM_BETA2 * v[k] + (1.0 - ADAM_BETA2) * grad[k] * grad[k];
                theta[k] -= params.learning_rate * (m[k] / c1) / ((v[k] / c2).sqrt() + ADAM_EPS);
            }
            net.set_flat(&theta);
        }
        outcome.epochs_run = epoch;
        if !use_val {
            outcome.weights = net.clone();
            outcome.best_epoch = epoch;
            continue;
        }
        let loss = val_loss(&net);
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("non-finite validation loss in epoch {epoch}")));
        }
        outcome.val_trace.push(loss);
        if loss < best {
            best = loss;
            since_best = 0;
            outcome.weights = net.clone();
            outcome.best_epoch = epoch;
        } else {
            since_best += 1;
            if since_best >= params.patience {
                break;
            }
        }
    }
    Ok(outcome)
}

/// Previous weights verbatim when available, otherwise a fresh Glorot draw.
pub fn transfer_weights(
    previous: Option<&NetworkWeights>,
    dims: &[usize],
    activation: Activation,
    output_bias: &[f64],
    seed: u64,
) -> NetworkWeights {
    match previous {
        Some(w) => w.clone(),
        None => NetworkWeights::glorot(dims, activation, output_bias, &mut ChaCha8Rng::seed_from_u64(seed)),
    }
}

/// Input matrix tagged with whether it has been standardized.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub values: Vec<f64>,
    pub width: usize,
    standardized: bool,
}

impl FeatureMatrix {
    pub fn raw(values: Vec<f64>, width: usize) -> Self {
        Self { values, width, standardized: false }
    }

    pub fn is_standardized(&self) -> bool {
        self.standardized
    }
}

/// Affine per-column map fitted on training rows. Columns whose training
/// values are all 0/1 pass through unchanged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub columns: Vec<usize>,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(data: &Dataset, rows: &[usize], columns: &[usize]) -> Self {
        let mut mean = Vec::with_capacity(columns.len());
        let mut scale = Vec::with_capacity(columns.len());
        for col in data.column_matrix(rows, columns) {
            let indicator = col.iter().all(|&v| v == 0.0 || v == 1.0);
            if indicator || col.is_empty() {
                mean.push(0.0);
                scale.push(1.0);
                continue;
            }
            let n = col.len() as f64;
            let mu = pairwise_sum(&col) / n;
            let sq: Vec<f64> = col.iter().map(|v| (v - mu) * (v - mu)).collect();
            let sd = (pairwise_sum(&sq) / n).sqrt();
            mean.push(mu);
            scale.push(if sd > 0.0 { sd } else { 1.0 });
        }
        Self { columns: columns.to_vec(), mean, scale }
    }

    pub fn width(&self) -> usize {
        self.columns.len()
    }

    /// Selected raw columns of every record of `data`.
    pub fn extract(&self, data: &Dataset) -> FeatureMatrix {
        let mut values = Vec::with_capacity(data.len() * self.width());
        for r in data.records() {
            values.extend(self.columns.iter().map(|&c| r.covariates[c]));
        }
        FeatureMatrix::raw(values, self.width())
    }

    pub fn apply(&self, mut m: FeatureMatrix) -> Result<FeatureMatrix> {
        if m.standardized {
            return Err(Error::Contract("features are already standardized".into()));
        }
        if m.width != self.width() {
            return Err(Error::Contract("feature width differs from the fitted standardizer".into()));
        }
        for row in m.values.chunks_mut(m.width) {
            for ((v, mu), s) in row.iter_mut().zip(&self.mean).zip(&self.scale) {
                *v = (*v - mu) / s;
            }
        }
        m.standardized = true;
        Ok(m)
    }

    pub fn transform(&self, data: &Dataset) -> Result<FeatureMatrix> {
        self.apply(self.extract(data))
    }
}
