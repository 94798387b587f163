//! Float pre-training: SGD with momentum over shuffled mini-batches.

use super::float::{FloatLayer, FloatModel, ModelGrads};
use super::{ActShape, Activation, Dataset};
use crate::rng::{self, stream};

#[derive(Debug, Clone, Copy)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 0.03,
            momentum: 0.9,
            batch_size: 32,
            epochs: 6,
            seed: 42,
        }
    }
}

/// Momentum buffers, one pair per parameterized layer:
/// `v = momentum * v + g; w -= lr * v`.
pub struct SgdState {
    velocity: ModelGrads,
    pub lr: f64,
    pub momentum: f64,
}

impl SgdState {
    pub fn new(model: &FloatModel, lr: f64, momentum: f64) -> Self {
        SgdState {
            velocity: model.zero_grads(),
            lr,
            momentum,
        }
    }

    pub fn step(&mut self, model: &mut FloatModel, grads: &ModelGrads) {
        for (i, layer) in model.layers.iter_mut().enumerate() {
            let (FloatLayer::Conv2d { weight, bias, .. } | FloatLayer::Linear { weight, bias, .. }) =
                layer
            else {
                continue;
            };
            let Some((dw, db)) = &grads[i] else { continue };
            let Some((vw, vb)) = &mut self.velocity[i] else {
                continue;
            };
            for ((w, v), g) in weight.iter_mut().zip(vw.iter_mut()).zip(dw.iter()) {
                *v = self.momentum * *v + g;
                *w -= self.lr * *v;
            }
            for ((b, v), g) in bias.iter_mut().zip(vb.iter_mut()).zip(db.iter()) {
                *v = self.momentum * *v + g;
                *b -= self.lr * *v;
            }
        }
    }
}

pub(crate) fn image_activation(
    ds: &Dataset,
    index: usize,
    input: (usize, usize, usize),
) -> Activation {
    Activation {
        shape: ActShape::Chw(input.0, input.1, input.2),
        data: ds
            .image(index)
            .iter()
            .map(|&px| px as f64 / 255.0)
            .collect(),
    }
}

pub(crate) fn batch_inputs(
    ds: &Dataset,
    indices: &[usize],
    input: (usize, usize, usize),
) -> (Vec<Activation>, Vec<usize>) {
    let inputs = indices
        .iter()
        .map(|&i| image_activation(ds, i, input))
        .collect();
    let labels = indices.iter().map(|&i| ds.labels[i] as usize).collect();
    (inputs, labels)
}

/// Plain cross-entropy training. Returns the mean loss of each epoch.
pub fn train_float(model: &mut FloatModel, data: &Dataset, cfg: &SgdConfig) -> Vec<f64> {
    model.validate().expect("trainable model");
    let mut shuffle_rng = rng::seeded(cfg.seed, stream::TRAIN_SHUFFLE);
    let mut sgd = SgdState::new(model, cfg.lr, cfg.momentum);
    let mut order: Vec<usize> = (0..data.count).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        rng::shuffle(&mut shuffle_rng, &mut order);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let (inputs, labels) = batch_inputs(data, chunk, model.input);
            let (loss, grads) = model.loss_and_grads(&inputs, &labels, 0.0);
            sgd.step(model, &grads);
            loss_sum += loss;
            batches += 1;
        }
        epoch_losses.push(loss_sum / batches as f64);
    }
    epoch_losses
}

/// Classification accuracy of the float path.
pub fn evaluate_float(model: &FloatModel, data: &Dataset) -> f64 {
    assert!(data.count > 0, "accuracy over an empty set");
    let mut correct = 0usize;
    for i in 0..data.count {
        let input = image_activation(data, i, model.input);
        let trace = model.forward(&input);
        let logits = trace.logits();
        let mut best = 0usize;
        for (j, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = j;
            }
        }
        if best == data.labels[i] as usize {
            correct += 1;
        }
    }
    correct as f64 / data.count as f64
}
