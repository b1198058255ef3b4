//! Local objectives: multinomial logistic regression and a ReLU MLP, both with
//! softmax cross-entropy, optional L2 regularization and hand-written
//! backpropagation.
//!
//! Parameters are one flat vector. Each layer stores its weight matrix
//! (`out x in`, row-major) followed by its bias (`out`).

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::data::Dataset;
use crate::rng::RngStream;
use crate::vector::ParamVector;

const EVAL_CHUNK: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Logreg,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// `[input, output]` for logreg, `[input, hidden.., output]` for the MLP.
    pub layer_sizes: Vec<usize>,
    pub l2_reg: f64,
}

impl ModelSpec {
    pub fn logreg(n_features: usize, n_classes: usize, l2_reg: f64) -> Self {
        ModelSpec {
            kind: ModelKind::Logreg,
            layer_sizes: vec![n_features, n_classes],
            l2_reg,
        }
    }

    pub fn mlp(n_features: usize, hidden: &[usize], n_classes: usize, l2_reg: f64) -> Self {
        let mut layer_sizes = vec![n_features];
        layer_sizes.extend_from_slice(hidden);
        layer_sizes.push(n_classes);
        ModelSpec {
            kind: ModelKind::Mlp,
            layer_sizes,
            l2_reg,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok_len = match self.kind {
            ModelKind::Logreg => self.layer_sizes.len() == 2,
            ModelKind::Mlp => self.layer_sizes.len() >= 3,
        };
        if !ok_len {
            return Err(Error::Parameter(format!(
                "{:?} model cannot have layer sizes {:?}",
                self.kind, self.layer_sizes
            )));
        }
        if self.layer_sizes.iter().any(|&n| n == 0) {
            return Err(Error::Parameter("layer sizes must be positive".into()));
        }
        if !(self.l2_reg >= 0.0 && self.l2_reg.is_finite()) {
            return Err(Error::Parameter(format!("l2_reg must be >= 0, got {}", self.l2_reg)));
        }
        Ok(())
    }

    pub fn n_inputs(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn n_classes(&self) -> usize {
        *self.layer_sizes.last().expect("validated spec")
    }

    /// `(fan_in, fan_out)` per layer.
    fn layers(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.layer_sizes.windows(2).map(|w| (w[0], w[1]))
    }

    /// Total parameter count `d`.
    pub fn n_params(&self) -> usize {
        self.layers().map(|(i, o)| o * i + o).sum()
    }

    fn check_inputs(&self, params: &ParamVector, data: &Dataset) -> Result<()> {
        self.validate()?;
        if params.len() != self.n_params() {
            return Err(Error::Dimension {
                expected: self.n_params(),
                actual: params.len(),
            });
        }
        if data.n_features() != self.n_inputs() {
            return Err(Error::Dimension {
                expected: self.n_inputs(),
                actual: data.n_features(),
            });
        }
        if data.n_classes() > self.n_classes() {
            return Err(Error::Parameter(format!(
                "model has {} outputs but data has {} classes",
                self.n_classes(),
                data.n_classes()
            )));
        }
        Ok(())
    }
}

/// Row indices into one client's shard.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    indices: Vec<usize>,
}

impl Batch {
    pub fn new(indices: Vec<usize>) -> Self {
        Batch { indices }
    }

    /// Every row, in natural order.
    pub fn full(n: usize) -> Self {
        Batch {
            indices: (0..n).collect(),
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Draws `min(b, shard_size)` distinct rows uniformly.
pub fn sample_batch(shard_size: usize, b: usize, rng: &mut RngStream) -> Result<Batch> {
    if shard_size == 0 {
        return Err(Error::Data("cannot sample a batch from an empty shard".into()));
    }
    if b == 0 {
        return Err(Error::Parameter("batch size must be >= 1".into()));
    }
    let mut all: Vec<usize> = (0..shard_size).collect();
    let (chosen, _) = all.partial_shuffle(rng, b.min(shard_size));
    Ok(Batch::new(chosen.to_vec()))
}

/// Logreg: zeros. MLP: He-uniform weights `U(-sqrt(6/fan_in), sqrt(6/fan_in))`,
/// zero biases.
pub fn init_params(spec: &ModelSpec, rng: &mut RngStream) -> Result<ParamVector> {
    spec.validate()?;
    let mut params = Vec::with_capacity(spec.n_params());
    for (fan_in, fan_out) in spec.layers() {
        let bound = (6.0 / fan_in as f64).sqrt();
        for _ in 0..fan_in * fan_out {
            params.push(match spec.kind {
                ModelKind::Logreg => 0.0,
                ModelKind::Mlp => bound * (2.0 * rng.uniform() - 1.0),
            });
        }
        params.extend(std::iter::repeat_n(0.0, fan_out));
    }
    Ok(ParamVector::from(params))
}

fn gather(data: &Dataset, rows: &[usize]) -> Array2<f64> {
    let f = data.n_features();
    let mut x = Array2::zeros((rows.len(), f));
    for (r, &i) in rows.iter().enumerate() {
        x.row_mut(r)
            .as_slice_mut()
            .expect("standard layout")
            .copy_from_slice(data.row(i));
    }
    x
}

fn layer_views<'a>(
    spec: &ModelSpec,
    params: &'a [f64],
) -> Vec<(ArrayView2<'a, f64>, ArrayView1<'a, f64>)> {
    let mut offset = 0;
    spec.layers()
        .map(|(fan_in, fan_out)| {
            let w = ArrayView2::from_shape((fan_out, fan_in), &params[offset..offset + fan_in * fan_out])
                .expect("layer shape");
            offset += fan_in * fan_out;
            let b = ArrayView1::from(&params[offset..offset + fan_out]);
            offset += fan_out;
            (w, b)
        })
        .collect()
}

/// Forward pass. Returns the input of every layer and the output logits.
fn forward(
    layers: &[(ArrayView2<f64>, ArrayView1<f64>)],
    x: Array2<f64>,
) -> (Vec<Array2<f64>>, Array2<f64>) {
    let mut inputs = Vec::with_capacity(layers.len());
    let mut act = x;
    for (w, b) in &layers[..layers.len() - 1] {
        let z = act.dot(&w.t()) + b;
        inputs.push(act);
        act = z.mapv(|v| v.max(0.0));
    }
    let (w, b) = layers.last().expect("at least one layer");
    let logits = act.dot(&w.t()) + b;
    inputs.push(act);
    (inputs, logits)
}

/// Per-row cross-entropy terms and softmax probabilities.
fn softmax_ce(logits: &Array2<f64>, labels: impl Iterator<Item = usize>) -> (Vec<f64>, Array2<f64>) {
    let mut probs = logits.clone();
    let mut losses = Vec::with_capacity(logits.nrows());
    for ((r, mut row), y) in probs.rows_mut().into_iter().enumerate().zip(labels) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        losses.push(sum.ln() + max - logits[[r, y]]);
        row.mapv_inplace(|v| v / sum);
    }
    (losses, probs)
}

fn l2_term(spec: &ModelSpec, params: &ParamVector) -> f64 {
    if spec.l2_reg == 0.0 {
        0.0
    } else {
        0.5 * spec.l2_reg * params.norm_sq()
    }
}

/// Mean softmax cross-entropy over the batch plus `(l2_reg/2) * ||params||^2`.
pub fn loss(spec: &ModelSpec, params: &ParamVector, data: &Dataset, batch: &Batch) -> Result<f64> {
    spec.check_inputs(params, data)?;
    if batch.is_empty() {
        return Err(Error::Parameter("loss over an empty batch".into()));
    }
    let layers = layer_views(spec, params.as_slice());
    let (_, logits) = forward(&layers, gather(data, batch.indices()));
    let labels = batch.indices().iter().map(|&i| data.label(i));
    let (losses, _) = softmax_ce(&logits, labels);
    Ok(losses.iter().sum::<f64>() / batch.len() as f64 + l2_term(spec, params))
}

/// Exact gradient of [`loss`].
pub fn gradient(
    spec: &ModelSpec,
    params: &ParamVector,
    data: &Dataset,
    batch: &Batch,
) -> Result<ParamVector> {
    loss_and_gradient(spec, params, data, batch).map(|(_, g)| g)
}

pub fn loss_and_gradient(
    spec: &ModelSpec,
    params: &ParamVector,
    data: &Dataset,
    batch: &Batch,
) -> Result<(f64, ParamVector)> {
    spec.check_inputs(params, data)?;
    if batch.is_empty() {
        return Err(Error::Parameter("gradient over an empty batch".into()));
    }
    let n = batch.len() as f64;
    let layers = layer_views(spec, params.as_slice());
    let (inputs, logits) = forward(&layers, gather(data, batch.indices()));
    let labels: Vec<usize> = batch.indices().iter().map(|&i| data.label(i)).collect();
    let (losses, probs) = softmax_ce(&logits, labels.iter().copied());

    // dL/dlogits = (softmax - onehot) / n
    let mut delta = probs;
    for (r, &y) in labels.iter().enumerate() {
        delta[[r, y]] -= 1.0;
    }
    delta /= n;

    let mut grads: Vec<(Array2<f64>, Array1<f64>)> = Vec::with_capacity(layers.len());
    for l in (0..layers.len()).rev() {
        grads.push((delta.t().dot(&inputs[l]), delta.sum_axis(Axis(0))));
        if l > 0 {
            let mut back = delta.dot(&layers[l].0);
            // ReLU mask: the layer input is zero exactly where the unit was inactive
            back.zip_mut_with(&inputs[l], |g, &a| {
                if a <= 0.0 {
                    *g = 0.0;
                }
            });
            delta = back;
        }
    }
    grads.reverse();

    let mut flat = Vec::with_capacity(params.len());
    for (dw, db) in &grads {
        flat.extend(dw.iter());
        flat.extend(db.iter());
    }
    let mut g = ParamVector::from(flat);
    if spec.l2_reg != 0.0 {
        g.axpy_in_place(spec.l2_reg, params)?;
    }
    let value = losses.iter().sum::<f64>() / n + l2_term(spec, params);
    Ok((value, g))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
}

/// Full-split mean loss (same objective as [`loss`]) and top-1 accuracy.
pub fn evaluate(spec: &ModelSpec, params: &ParamVector, data: &Dataset) -> Result<Evaluation> {
    spec.check_inputs(params, data)?;
    if data.is_empty() {
        return Err(Error::Parameter("evaluation split is empty".into()));
    }
    let layers = layer_views(spec, params.as_slice());
    let mut total_loss = 0.0;
    let mut correct = 0usize;
    let rows: Vec<usize> = (0..data.len()).collect();
    for chunk in rows.chunks(EVAL_CHUNK) {
        let (_, logits) = forward(&layers, gather(data, chunk));
        let (losses, _) = softmax_ce(&logits, chunk.iter().map(|&i| data.label(i)));
        total_loss += losses.iter().sum::<f64>();
        for (r, &i) in chunk.iter().enumerate() {
            let row = logits.slice(s![r, ..]);
            // first maximal logit wins
            let pred = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (j, &v)| if v > bv { (j, v) } else { (bi, bv) })
                .0;
            if pred == data.label(i) {
                correct += 1;
            }
        }
    }
    let n = data.len() as f64;
    Ok(Evaluation {
        loss: total_loss / n + l2_term(spec, params),
        accuracy: correct as f64 / n,
    })
}
