//! Int8 inference with 32-bit accumulation.
//!
//! Weights are int8 with a per-tensor scale, biases int32 at the
//! accumulator scale (weight scale times input scale), and every
//! Conv/Linear output is requantized to int8 against an activation scale
//! calibrated once on a sample batch. ReLU, MaxPool, and Flatten operate
//! directly on int8 values and preserve the running scale.

use super::{
    conv_out_hw, pool_out_hw, ActShape, Activation, ConvSpec, FloatLayer, FloatModel, LinearSpec,
    PoolSpec,
};
use crate::quant::{self, QuantizedBias, QuantizedTensor};

#[derive(Debug, Clone, PartialEq)]
pub enum QuantLayer {
    Conv2d {
        spec: ConvSpec,
        weight: QuantizedTensor,
        bias: QuantizedBias,
        /// Scale of the requantized int8 output activation.
        out_scale: f64,
    },
    Linear {
        spec: LinearSpec,
        weight: QuantizedTensor,
        bias: QuantizedBias,
        out_scale: f64,
    },
    Relu,
    MaxPool2d(PoolSpec),
    Flatten,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantModel {
    pub input: (usize, usize, usize),
    /// Scale of the quantized input activation (pixels mapped to `[0,1]`).
    pub input_scale: f64,
    pub layers: Vec<QuantLayer>,
}

impl QuantModel {
    /// Weight tensors in layer order (the unit all protection operates on).
    pub fn weight_tensors(&self) -> Vec<&QuantizedTensor> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                QuantLayer::Conv2d { weight, .. } | QuantLayer::Linear { weight, .. } => {
                    Some(weight)
                }
                _ => None,
            })
            .collect()
    }

    pub fn total_weights(&self) -> usize {
        self.weight_tensors().iter().map(|t| t.len()).sum()
    }
}

/// Turn pixel bytes into the quantized input activation.
fn quantize_input(image: &[u8], input_scale: f64) -> Vec<i8> {
    image
        .iter()
        .map(|&px| {
            let v = (px as f64 / 255.0 / input_scale).round();
            v.clamp(-127.0, 127.0) as i8
        })
        .collect()
}

/// Quantize a float model: weights and biases by formula, activation
/// scales from the max absolute value seen at each requantization point
/// over the calibration images. Calibration is done once; the scales stay
/// fixed afterwards.
pub fn quantize_model(model: &FloatModel, calib: &[&[u8]]) -> QuantModel {
    assert!(!calib.is_empty(), "calibration needs at least one image");
    let mut input_max = 0.0f64;
    let mut out_max: Vec<f64> = model
        .layers
        .iter()
        .filter(|l| matches!(l, FloatLayer::Conv2d { .. } | FloatLayer::Linear { .. }))
        .map(|_| 0.0)
        .collect();

    for image in calib {
        let input = Activation {
            shape: ActShape::Chw(model.input.0, model.input.1, model.input.2),
            data: image.iter().map(|&px| px as f64 / 255.0).collect(),
        };
        for &v in &input.data {
            input_max = input_max.max(v.abs());
        }
        let trace = model.forward(&input);
        let mut j = 0;
        for (i, layer) in model.layers.iter().enumerate() {
            if matches!(layer, FloatLayer::Conv2d { .. } | FloatLayer::Linear { .. }) {
                for &v in &trace.acts[i + 1].data {
                    out_max[j] = out_max[j].max(v.abs());
                }
                j += 1;
            }
        }
    }

    let to_scale = |max: f64| if max == 0.0 { 1.0 } else { max / 127.0 };
    let input_scale = to_scale(input_max);

    let mut layers = Vec::with_capacity(model.layers.len());
    let mut act_scale = input_scale;
    let mut j = 0;
    for layer in &model.layers {
        match layer {
            FloatLayer::Conv2d { spec, weight, bias } => {
                let w = quant::quantize(weight, spec.dims().to_vec(), 8).expect("finite weights");
                let b = quant::quantize_bias(bias, w.scale * act_scale).expect("bias fits int32");
                act_scale = to_scale(out_max[j]);
                j += 1;
                layers.push(QuantLayer::Conv2d {
                    spec: *spec,
                    weight: w,
                    bias: b,
                    out_scale: act_scale,
                });
            }
            FloatLayer::Linear { spec, weight, bias } => {
                let w = quant::quantize(weight, spec.dims().to_vec(), 8).expect("finite weights");
                let b = quant::quantize_bias(bias, w.scale * act_scale).expect("bias fits int32");
                act_scale = to_scale(out_max[j]);
                j += 1;
                layers.push(QuantLayer::Linear {
                    spec: *spec,
                    weight: w,
                    bias: b,
                    out_scale: act_scale,
                });
            }
            FloatLayer::Relu => layers.push(QuantLayer::Relu),
            FloatLayer::MaxPool2d(spec) => layers.push(QuantLayer::MaxPool2d(*spec)),
            FloatLayer::Flatten => layers.push(QuantLayer::Flatten),
        }
    }
    QuantModel {
        input: model.input,
        input_scale,
        layers,
    }
}

/// The float model computing on dequantized parameters; the reference for
/// int8 agreement checks.
pub fn dequantize_model(qm: &QuantModel) -> FloatModel {
    let layers = qm
        .layers
        .iter()
        .map(|layer| match layer {
            QuantLayer::Conv2d {
                spec, weight, bias, ..
            } => FloatLayer::Conv2d {
                spec: *spec,
                weight: quant::dequantize(weight),
                bias: quant::dequantize_bias(bias),
            },
            QuantLayer::Linear {
                spec, weight, bias, ..
            } => FloatLayer::Linear {
                spec: *spec,
                weight: quant::dequantize(weight),
                bias: quant::dequantize_bias(bias),
            },
            QuantLayer::Relu => FloatLayer::Relu,
            QuantLayer::MaxPool2d(spec) => FloatLayer::MaxPool2d(*spec),
            QuantLayer::Flatten => FloatLayer::Flatten,
        })
        .collect();
    FloatModel {
        input: qm.input,
        layers,
    }
}

/// Int8 forward pass over one image; returns the requantized int8 logits.
/// Products are int8 x int8 widened to int32 and accumulated in int32;
/// the fan-in bound is enforced at model validation.
pub fn forward_int8(qm: &QuantModel, image: &[u8]) -> Vec<i8> {
    let (c, h, w) = qm.input;
    assert_eq!(image.len(), c * h * w, "input size");
    let mut act = quantize_input(image, qm.input_scale);
    let mut act_scale = qm.input_scale;
    let mut shape = ActShape::Chw(c, h, w);

    for layer in &qm.layers {
        match layer {
            QuantLayer::Conv2d {
                spec,
                weight,
                bias,
                out_scale,
            } => {
                let ActShape::Chw(_, ih, iw) = shape else {
                    panic!("conv input must be a feature map");
                };
                let (oh, ow) = conv_out_hw(spec, ih, iw);
                let multiplier = weight.scale * act_scale / out_scale;
                let mut out = vec![0i8; spec.out_ch * oh * ow];
                for o in 0..spec.out_ch {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc: i32 = bias.values[o];
                            for i in 0..spec.in_ch {
                                for ky in 0..spec.kh {
                                    let iy =
                                        (oy * spec.stride + ky) as isize - spec.padding as isize;
                                    if iy < 0 || iy >= ih as isize {
                                        continue;
                                    }
                                    for kx in 0..spec.kw {
                                        let ix = (ox * spec.stride + kx) as isize
                                            - spec.padding as isize;
                                        if ix < 0 || ix >= iw as isize {
                                            continue;
                                        }
                                        let wv = weight.values
                                            [((o * spec.in_ch + i) * spec.kh + ky) * spec.kw + kx]
                                            as i32;
                                        let xv =
                                            act[(i * ih + iy as usize) * iw + ix as usize] as i32;
                                        acc += wv * xv;
                                    }
                                }
                            }
                            out[(o * oh + oy) * ow + ox] = requantize(acc, multiplier);
                        }
                    }
                }
                act = out;
                act_scale = *out_scale;
                shape = ActShape::Chw(spec.out_ch, oh, ow);
            }
            QuantLayer::Linear {
                spec,
                weight,
                bias,
                out_scale,
            } => {
                assert_eq!(shape.elems(), spec.in_f, "linear input length");
                let multiplier = weight.scale * act_scale / out_scale;
                let mut out = vec![0i8; spec.out_f];
                #[allow(clippy::needless_range_loop)]
                for o in 0..spec.out_f {
                    let mut acc: i32 = bias.values[o];
                    let row = &weight.values[o * spec.in_f..(o + 1) * spec.in_f];
                    for (wv, xv) in row.iter().zip(act.iter()) {
                        acc += *wv as i32 * *xv as i32;
                    }
                    out[o] = requantize(acc, multiplier);
                }
                act = out;
                act_scale = *out_scale;
                shape = ActShape::Flat(spec.out_f);
            }
            QuantLayer::Relu => {
                for v in act.iter_mut() {
                    *v = (*v).max(0);
                }
            }
            QuantLayer::MaxPool2d(spec) => {
                let ActShape::Chw(ic, ih, iw) = shape else {
                    panic!("pool input must be a feature map");
                };
                let (oh, ow) = pool_out_hw(spec, ih, iw);
                let mut out = vec![0i8; ic * oh * ow];
                for ch in 0..ic {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut best = i8::MIN;
                            for ky in 0..spec.kernel {
                                for kx in 0..spec.kernel {
                                    let v = act[(ch * ih + oy * spec.stride + ky) * iw
                                        + ox * spec.stride
                                        + kx];
                                    best = best.max(v);
                                }
                            }
                            out[(ch * oh + oy) * ow + ox] = best;
                        }
                    }
                }
                act = out;
                shape = ActShape::Chw(ic, oh, ow);
            }
            QuantLayer::Flatten => {
                shape = ActShape::Flat(shape.elems());
            }
        }
    }
    act
}

fn requantize(acc: i32, multiplier: f64) -> i8 {
    (acc as f64 * multiplier).round().clamp(-127.0, 127.0) as i8
}

/// Classification accuracy of the int8 path over a labeled image set.
/// Argmax ties resolve to the lowest class index.
pub fn eval_int8(qm: &QuantModel, images: &[&[u8]], labels: &[u8]) -> f64 {
    assert_eq!(images.len(), labels.len());
    assert!(!images.is_empty(), "accuracy over an empty set");
    let mut correct = 0usize;
    for (image, &label) in images.iter().zip(labels.iter()) {
        let logits = forward_int8(qm, image);
        if argmax_i8(&logits) == label as usize {
            correct += 1;
        }
    }
    correct as f64 / images.len() as f64
}

pub(crate) fn argmax_i8(logits: &[i8]) -> usize {
    let mut best = 0usize;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}
