//! Float64 forward and backward passes.
//!
//! Gradients are hand-derived per layer; the finite-difference oracle in
//! the test suite checks the full chain.

use super::{
    conv_out_hw, pool_out_hw, ActShape, Activation, ConvSpec, LinearSpec, NnError, PoolSpec,
    MAX_FAN_IN,
};
use crate::rng::{self, stream};

#[derive(Debug, Clone, PartialEq)]
pub enum FloatLayer {
    Conv2d {
        spec: ConvSpec,
        weight: Vec<f64>,
        bias: Vec<f64>,
    },
    Linear {
        spec: LinearSpec,
        weight: Vec<f64>,
        bias: Vec<f64>,
    },
    Relu,
    MaxPool2d(PoolSpec),
    Flatten,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FloatModel {
    /// Input feature-map shape `(channels, height, width)`.
    pub input: (usize, usize, usize),
    pub layers: Vec<FloatLayer>,
}

/// All activations of one forward pass (`acts[0]` is the input,
/// `acts[i + 1]` the output of layer `i`) plus max-pool argmax indices,
/// one vector per pool layer in order of appearance.
pub struct ForwardTrace {
    pub acts: Vec<Activation>,
    pool_argmax: Vec<Vec<usize>>,
}

impl ForwardTrace {
    pub fn logits(&self) -> &[f64] {
        &self.acts.last().expect("nonempty model").data
    }
}

/// Per-layer parameter gradients, aligned with `FloatModel::layers`.
/// `None` for parameterless layers.
pub type ModelGrads = Vec<Option<(Vec<f64>, Vec<f64>)>>;

impl FloatModel {
    /// Check shape compatibility through the whole stack and the int32
    /// accumulation fan-in bound.
    pub fn validate(&self) -> Result<(), NnError> {
        if self.layers.is_empty() {
            return Err(NnError::Empty);
        }
        let mut shape = ActShape::Chw(self.input.0, self.input.1, self.input.2);
        for (i, layer) in self.layers.iter().enumerate() {
            shape = output_shape(layer, shape, i)?;
            let fan_in = match layer {
                FloatLayer::Conv2d { spec, .. } => spec.fan_in(),
                FloatLayer::Linear { spec, .. } => spec.in_f,
                _ => 0,
            };
            if fan_in > MAX_FAN_IN {
                return Err(NnError::FanInTooLarge { layer: i, fan_in });
            }
        }
        Ok(())
    }

    /// Shape of the logits vector.
    pub fn output_len(&self) -> usize {
        let mut shape = ActShape::Chw(self.input.0, self.input.1, self.input.2);
        for (i, layer) in self.layers.iter().enumerate() {
            shape = output_shape(layer, shape, i).expect("validated model");
        }
        shape.elems()
    }

    /// Forward pass keeping every intermediate activation.
    pub fn forward(&self, input: &Activation) -> ForwardTrace {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        let mut pool_argmax = Vec::new();
        acts.push(input.clone());
        for layer in &self.layers {
            let x = acts.last().unwrap();
            let out = match layer {
                FloatLayer::Conv2d { spec, weight, bias } => conv_forward(spec, weight, bias, x),
                FloatLayer::Linear { spec, weight, bias } => linear_forward(spec, weight, bias, x),
                FloatLayer::Relu => relu_forward(x),
                FloatLayer::MaxPool2d(spec) => {
                    let (out, argmax) = pool_forward(spec, x);
                    pool_argmax.push(argmax);
                    out
                }
                FloatLayer::Flatten => Activation {
                    shape: ActShape::Flat(x.shape.elems()),
                    data: x.data.clone(),
                },
            };
            acts.push(out);
        }
        ForwardTrace { acts, pool_argmax }
    }

    /// Backward pass from a gradient on the logits. Accumulates parameter
    /// gradients into `grads` (so batches can share one buffer) and
    /// returns nothing else; the input gradient is discarded.
    pub fn backward(&self, trace: &ForwardTrace, dlogits: &[f64], grads: &mut ModelGrads) {
        let mut pool_idx = trace.pool_argmax.len();
        let mut dout = dlogits.to_vec();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let x = &trace.acts[i];
            let y = &trace.acts[i + 1];
            dout = match layer {
                FloatLayer::Conv2d { spec, weight, .. } => {
                    let (dw, db) = grads[i].as_mut().expect("conv grads allocated");
                    conv_backward(spec, weight, x, &dout, dw, db)
                }
                FloatLayer::Linear { spec, weight, .. } => {
                    let (dw, db) = grads[i].as_mut().expect("linear grads allocated");
                    linear_backward(spec, weight, x, &dout, dw, db)
                }
                FloatLayer::Relu => dout
                    .iter()
                    .zip(y.data.iter())
                    .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
                    .collect(),
                FloatLayer::MaxPool2d(_) => {
                    pool_idx -= 1;
                    let argmax = &trace.pool_argmax[pool_idx];
                    let mut din = vec![0.0; x.shape.elems()];
                    for (g, &src) in dout.iter().zip(argmax.iter()) {
                        din[src] += g;
                    }
                    din
                }
                FloatLayer::Flatten => dout,
            };
        }
    }

    /// Zeroed gradient buffers matching this model's parameters.
    pub fn zero_grads(&self) -> ModelGrads {
        self.layers
            .iter()
            .map(|layer| match layer {
                FloatLayer::Conv2d { weight, bias, .. }
                | FloatLayer::Linear { weight, bias, .. } => {
                    Some((vec![0.0; weight.len()], vec![0.0; bias.len()]))
                }
                _ => None,
            })
            .collect()
    }

    /// Mean cross-entropy loss over a batch plus `lambda * sum ||W||^2`
    /// over the weight tensors, with its gradients. Gradients are exact
    /// for the float graph; quantization-aware training evaluates them at
    /// quantized parameter values (straight-through).
    pub fn loss_and_grads(
        &self,
        inputs: &[Activation],
        labels: &[usize],
        lambda: f64,
    ) -> (f64, ModelGrads) {
        assert_eq!(inputs.len(), labels.len());
        let batch = inputs.len() as f64;
        let mut grads = self.zero_grads();
        let mut loss = 0.0;
        for (input, &label) in inputs.iter().zip(labels.iter()) {
            let trace = self.forward(input);
            let (sample_loss, mut dlogits) = cross_entropy(trace.logits(), label);
            loss += sample_loss / batch;
            for g in dlogits.iter_mut() {
                *g /= batch;
            }
            self.backward(&trace, &dlogits, &mut grads);
        }
        if lambda != 0.0 {
            for (layer, grad) in self.layers.iter().zip(grads.iter_mut()) {
                if let (
                    FloatLayer::Conv2d { weight, .. } | FloatLayer::Linear { weight, .. },
                    Some((dw, _)),
                ) = (layer, grad)
                {
                    for (w, d) in weight.iter().zip(dw.iter_mut()) {
                        loss += lambda * w * w;
                        *d += 2.0 * lambda * w;
                    }
                }
            }
        }
        (loss, grads)
    }

    /// The desk-scale reference network for 28x28 single-channel inputs:
    /// Conv(8,3x3,pad 1)-ReLU-MaxPool2-Conv(16,3x3,pad 1)-ReLU-MaxPool2-
    /// Flatten-Linear(10). About 9k weights, 1.1k protection blocks.
    pub fn reference(seed: u64) -> FloatModel {
        let conv1 = ConvSpec {
            out_ch: 8,
            in_ch: 1,
            kh: 3,
            kw: 3,
            stride: 1,
            padding: 1,
        };
        let conv2 = ConvSpec {
            out_ch: 16,
            in_ch: 8,
            kh: 3,
            kw: 3,
            stride: 1,
            padding: 1,
        };
        let pool = PoolSpec {
            kernel: 2,
            stride: 2,
        };
        let fc = LinearSpec {
            out_f: 10,
            in_f: 16 * 7 * 7,
        };
        let mut rng = rng::seeded(seed, stream::WEIGHT_INIT);
        let model = FloatModel {
            input: (1, 28, 28),
            layers: vec![
                FloatLayer::Conv2d {
                    spec: conv1,
                    weight: he_uniform(&mut rng, conv1.weight_len(), conv1.fan_in()),
                    bias: vec![0.0; conv1.out_ch],
                },
                FloatLayer::Relu,
                FloatLayer::MaxPool2d(pool),
                FloatLayer::Conv2d {
                    spec: conv2,
                    weight: he_uniform(&mut rng, conv2.weight_len(), conv2.fan_in()),
                    bias: vec![0.0; conv2.out_ch],
                },
                FloatLayer::Relu,
                FloatLayer::MaxPool2d(pool),
                FloatLayer::Flatten,
                FloatLayer::Linear {
                    spec: fc,
                    weight: he_uniform(&mut rng, fc.weight_len(), fc.in_f),
                    bias: vec![0.0; fc.out_f],
                },
            ],
        };
        model.validate().expect("reference model is well-formed");
        model
    }
}

fn he_uniform(rng: &mut impl rand::RngCore, len: usize, fan_in: usize) -> Vec<f64> {
    let bound = (6.0 / fan_in as f64).sqrt();
    (0..len)
        .map(|_| (rng::unit_f64(rng) * 2.0 - 1.0) * bound)
        .collect()
}

/// Stable softmax cross-entropy for one sample: loss and d(loss)/d(logits).
pub fn cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let mut grad: Vec<f64> = exps.iter().map(|&e| e / sum).collect();
    let loss = -(grad[label].max(f64::MIN_POSITIVE)).ln();
    grad[label] -= 1.0;
    (loss, grad)
}

fn conv_forward(spec: &ConvSpec, weight: &[f64], bias: &[f64], x: &Activation) -> Activation {
    let ActShape::Chw(c, h, w) = x.shape else {
        panic!("conv input must be a feature map, got {}", x.shape);
    };
    assert_eq!(c, spec.in_ch, "conv input channels");
    let (oh, ow) = conv_out_hw(spec, h, w);
    let mut out = Activation::zeros(ActShape::Chw(spec.out_ch, oh, ow));
    for o in 0..spec.out_ch {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias[o];
                for i in 0..spec.in_ch {
                    for ky in 0..spec.kh {
                        let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..spec.kw {
                            let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += weight[((o * spec.in_ch + i) * spec.kh + ky) * spec.kw + kx]
                                * x.data[(i * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
                out.data[(o * oh + oy) * ow + ox] = acc;
            }
        }
    }
    out
}

fn conv_backward(
    spec: &ConvSpec,
    weight: &[f64],
    x: &Activation,
    dout: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
) -> Vec<f64> {
    let ActShape::Chw(_, h, w) = x.shape else {
        unreachable!()
    };
    let (oh, ow) = conv_out_hw(spec, h, w);
    let mut din = vec![0.0; x.shape.elems()];
    for o in 0..spec.out_ch {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = dout[(o * oh + oy) * ow + ox];
                if g == 0.0 {
                    continue;
                }
                db[o] += g;
                for i in 0..spec.in_ch {
                    for ky in 0..spec.kh {
                        let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..spec.kw {
                            let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let widx = ((o * spec.in_ch + i) * spec.kh + ky) * spec.kw + kx;
                            let xidx = (i * h + iy as usize) * w + ix as usize;
                            dw[widx] += g * x.data[xidx];
                            din[xidx] += g * weight[widx];
                        }
                    }
                }
            }
        }
    }
    din
}

fn linear_forward(spec: &LinearSpec, weight: &[f64], bias: &[f64], x: &Activation) -> Activation {
    assert_eq!(x.shape.elems(), spec.in_f, "linear input length");
    let mut out = Activation::zeros(ActShape::Flat(spec.out_f));
    for o in 0..spec.out_f {
        let row = &weight[o * spec.in_f..(o + 1) * spec.in_f];
        let mut acc = bias[o];
        for (wv, xv) in row.iter().zip(x.data.iter()) {
            acc += wv * xv;
        }
        out.data[o] = acc;
    }
    out
}

fn linear_backward(
    spec: &LinearSpec,
    weight: &[f64],
    x: &Activation,
    dout: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
) -> Vec<f64> {
    let mut din = vec![0.0; spec.in_f];
    for o in 0..spec.out_f {
        let g = dout[o];
        db[o] += g;
        let row = &weight[o * spec.in_f..(o + 1) * spec.in_f];
        let drow = &mut dw[o * spec.in_f..(o + 1) * spec.in_f];
        for i in 0..spec.in_f {
            drow[i] += g * x.data[i];
            din[i] += g * row[i];
        }
    }
    din
}

fn relu_forward(x: &Activation) -> Activation {
    Activation {
        shape: x.shape,
        data: x.data.iter().map(|&v| v.max(0.0)).collect(),
    }
}

fn pool_forward(spec: &PoolSpec, x: &Activation) -> (Activation, Vec<usize>) {
    let ActShape::Chw(c, h, w) = x.shape else {
        panic!("pool input must be a feature map, got {}", x.shape);
    };
    let (oh, ow) = pool_out_hw(spec, h, w);
    let mut out = Activation::zeros(ActShape::Chw(c, oh, ow));
    let mut argmax = vec![0usize; c * oh * ow];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0;
                for ky in 0..spec.kernel {
                    for kx in 0..spec.kernel {
                        let idx = (ch * h + oy * spec.stride + ky) * w + ox * spec.stride + kx;
                        // Strict comparison: ties keep the first index, so
                        // the backward route is deterministic.
                        if x.data[idx] > best {
                            best = x.data[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.data[(ch * oh + oy) * ow + ox] = best;
                argmax[(ch * oh + oy) * ow + ox] = best_idx;
            }
        }
    }
    (out, argmax)
}

fn output_shape(layer: &FloatLayer, shape: ActShape, index: usize) -> Result<ActShape, NnError> {
    let mismatch = |expected: String| NnError::ShapeMismatch {
        layer: index,
        expected,
        got: shape.to_string(),
    };
    match layer {
        FloatLayer::Conv2d { spec, .. } => match shape {
            ActShape::Chw(c, h, w)
                if c == spec.in_ch
                    && h + 2 * spec.padding >= spec.kh
                    && w + 2 * spec.padding >= spec.kw =>
            {
                let (oh, ow) = conv_out_hw(spec, h, w);
                Ok(ActShape::Chw(spec.out_ch, oh, ow))
            }
            _ => Err(mismatch(format!("{} input channels", spec.in_ch))),
        },
        FloatLayer::Linear { spec, .. } => {
            if shape.elems() == spec.in_f {
                Ok(ActShape::Flat(spec.out_f))
            } else {
                Err(mismatch(format!("{} inputs", spec.in_f)))
            }
        }
        FloatLayer::Relu => Ok(shape),
        FloatLayer::MaxPool2d(spec) => match shape {
            ActShape::Chw(c, h, w) if h >= spec.kernel && w >= spec.kernel => {
                let (oh, ow) = pool_out_hw(spec, h, w);
                Ok(ActShape::Chw(c, oh, ow))
            }
            _ => Err(mismatch("feature map at least kernel-sized".into())),
        },
        FloatLayer::Flatten => Ok(ActShape::Flat(shape.elems())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn toy_model() -> FloatModel {
        // Two parameterized layers on a 6x6 input.
        let conv = ConvSpec {
            out_ch: 2,
            in_ch: 1,
            kh: 3,
            kw: 3,
            stride: 1,
            padding: 0,
        };
        let fc = LinearSpec {
            out_f: 3,
            in_f: 2 * 4 * 4,
        };
        let mut rng = seeded(5, 0);
        FloatModel {
            input: (1, 6, 6),
            layers: vec![
                FloatLayer::Conv2d {
                    spec: conv,
                    weight: (0..conv.weight_len())
                        .map(|_| crate::rng::unit_f64(&mut rng) - 0.5)
                        .collect(),
                    bias: (0..2)
                        .map(|_| crate::rng::unit_f64(&mut rng) - 0.5)
                        .collect(),
                },
                FloatLayer::Relu,
                FloatLayer::Flatten,
                FloatLayer::Linear {
                    spec: fc,
                    weight: (0..fc.weight_len())
                        .map(|_| crate::rng::unit_f64(&mut rng) - 0.5)
                        .collect(),
                    bias: (0..3)
                        .map(|_| crate::rng::unit_f64(&mut rng) - 0.5)
                        .collect(),
                },
            ],
        }
    }

    fn toy_batch() -> (Vec<Activation>, Vec<usize>) {
        let mut rng = seeded(6, 0);
        let inputs: Vec<Activation> = (0..4)
            .map(|_| Activation {
                shape: ActShape::Chw(1, 6, 6),
                data: (0..36).map(|_| crate::rng::unit_f64(&mut rng)).collect(),
            })
            .collect();
        (inputs, vec![0, 1, 2, 1])
    }

    #[test]
    fn validate_catches_shape_mismatch() {
        let mut model = toy_model();
        if let FloatLayer::Linear { spec, .. } = &mut model.layers[3] {
            spec.in_f = 31;
        }
        assert!(matches!(
            model.validate(),
            Err(NnError::ShapeMismatch { layer: 3, .. })
        ));
    }

    #[test]
    fn validate_enforces_the_accumulator_fan_in_bound() {
        let too_wide = super::super::MAX_FAN_IN + 1;
        let spec = LinearSpec {
            out_f: 1,
            in_f: too_wide,
        };
        let model = FloatModel {
            input: (1, 1, too_wide),
            layers: vec![
                FloatLayer::Flatten,
                FloatLayer::Linear {
                    spec,
                    weight: vec![0.0; too_wide],
                    bias: vec![0.0],
                },
            ],
        };
        assert!(matches!(
            model.validate(),
            Err(NnError::FanInTooLarge { layer: 1, .. })
        ));
    }

    #[test]
    fn zero_model_gives_zero_logits() {
        let mut model = toy_model();
        for layer in &mut model.layers {
            if let FloatLayer::Conv2d { weight, bias, .. }
            | FloatLayer::Linear { weight, bias, .. } = layer
            {
                weight.iter_mut().for_each(|w| *w = 0.0);
                bias.iter_mut().for_each(|b| *b = 0.0);
            }
        }
        let (inputs, _) = toy_batch();
        let trace = model.forward(&inputs[0]);
        assert!(trace.logits().iter().all(|&l| l == 0.0));
    }

    #[test]
    fn lambda_zero_is_pure_cross_entropy() {
        let model = toy_model();
        let (inputs, labels) = toy_batch();
        let (loss, _) = model.loss_and_grads(&inputs, &labels, 0.0);
        let mut expected = 0.0;
        for (input, &label) in inputs.iter().zip(labels.iter()) {
            let trace = model.forward(input);
            expected += cross_entropy(trace.logits(), label).0 / inputs.len() as f64;
        }
        assert!((loss - expected).abs() < 1e-12);
    }

    #[test]
    fn frobenius_term_adds_2_lambda_w() {
        let model = toy_model();
        let (inputs, labels) = toy_batch();
        let lambda = 0.01;
        let (_, g0) = model.loss_and_grads(&inputs, &labels, 0.0);
        let (_, g1) = model.loss_and_grads(&inputs, &labels, lambda);
        for (layer, (a, b)) in model.layers.iter().zip(g0.iter().zip(g1.iter())) {
            if let (
                FloatLayer::Conv2d { weight, .. } | FloatLayer::Linear { weight, .. },
                (Some((dw0, db0)), Some((dw1, db1))),
            ) = (layer, (a, b))
            {
                for ((w, d0), d1) in weight.iter().zip(dw0.iter()).zip(dw1.iter()) {
                    assert!((d1 - d0 - 2.0 * lambda * w).abs() < 1e-12);
                }
                assert_eq!(db0, db1, "bias grads unaffected by the weight norm term");
            }
        }
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn gradients_match_central_differences() {
        let mut model = toy_model();
        let (inputs, labels) = toy_batch();
        let lambda = 0.01;
        let (_, grads) = model.loss_and_grads(&inputs, &labels, lambda);
        let h = 1e-5;
        let mut checked = 0usize;
        for li in 0..model.layers.len() {
            let (nw, nb) = match &model.layers[li] {
                FloatLayer::Conv2d { weight, bias, .. }
                | FloatLayer::Linear { weight, bias, .. } => (weight.len(), bias.len()),
                _ => continue,
            };
            for (is_bias, n) in [(false, nw), (true, nb)] {
                for p in 0..n {
                    let read = |model: &FloatModel| -> f64 {
                        match &model.layers[li] {
                            FloatLayer::Conv2d { weight, bias, .. }
                            | FloatLayer::Linear { weight, bias, .. } => {
                                if is_bias {
                                    bias[p]
                                } else {
                                    weight[p]
                                }
                            }
                            _ => unreachable!(),
                        }
                    };
                    let orig = read(&model);
                    let set = |model: &mut FloatModel, v: f64| match &mut model.layers[li] {
                        FloatLayer::Conv2d { weight, bias, .. }
                        | FloatLayer::Linear { weight, bias, .. } => {
                            if is_bias {
                                bias[p] = v
                            } else {
                                weight[p] = v
                            }
                        }
                        _ => unreachable!(),
                    };
                    set(&mut model, orig + h);
                    let (lp, _) = model.loss_and_grads(&inputs, &labels, lambda);
                    set(&mut model, orig - h);
                    let (lm, _) = model.loss_and_grads(&inputs, &labels, lambda);
                    set(&mut model, orig);
                    let fd = (lp - lm) / (2.0 * h);
                    let (dw, db) = grads[li].as_ref().unwrap();
                    let an = if is_bias { db[p] } else { dw[p] };
                    let denom = fd.abs().max(an.abs()).max(1e-8);
                    assert!(
                        (fd - an).abs() / denom < 1e-3,
                        "layer {li} {} {p}: fd {fd} vs an {an}",
                        if is_bias { "bias" } else { "weight" }
                    );
                    checked += 1;
                }
            }
        }
        assert!(checked > 100);
    }
}
