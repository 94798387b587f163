//! A small CNN engine: float64 training and int8 inference with 32-bit
//! accumulation, for desk-scale experiments.
//!
//! Supported layers: Conv2D (stride/padding), Linear, ReLU, MaxPool2D,
//! Flatten. Activations flow as `(C, H, W)` feature maps until a Flatten,
//! then as flat vectors.

mod dataset;
mod float;
mod quantized;
mod train;

pub use dataset::{
    generate_synthetic, load_idx, load_idx_images, load_idx_labels, Dataset, DatasetError,
};
pub use float::{cross_entropy, FloatLayer, FloatModel, ForwardTrace, ModelGrads};
pub use quantized::{
    dequantize_model, eval_int8, forward_int8, quantize_model, QuantLayer, QuantModel,
};
pub use train::{evaluate_float, train_float, SgdConfig, SgdState};

pub(crate) use train::batch_inputs;

use thiserror::Error;

/// Largest fan-in (products per output accumulator) that keeps an int8
/// x int8 dot product inside int32: 127 * 127 * 2^17 < 2^31.
pub const MAX_FAN_IN: usize = 1 << 17;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum NnError {
    #[error("shape mismatch at layer {layer}: expected {expected}, got {got}")]
    ShapeMismatch {
        layer: usize,
        expected: String,
        got: String,
    },
    #[error("layer {layer} fan-in {fan_in} exceeds the int32 accumulation bound {MAX_FAN_IN}")]
    FanInTooLarge { layer: usize, fan_in: usize },
    #[error("model has no layers")]
    Empty,
}

/// Convolution hyperparameters: `weight[out_ch][in_ch][kh][kw]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub out_ch: usize,
    pub in_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub fn weight_len(&self) -> usize {
        self.out_ch * self.in_ch * self.kh * self.kw
    }

    pub fn fan_in(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.out_ch, self.in_ch, self.kh, self.kw]
    }
}

/// Fully connected layer: `weight[out_f][in_f]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LinearSpec {
    pub out_f: usize,
    pub in_f: usize,
}

impl LinearSpec {
    pub fn weight_len(&self) -> usize {
        self.out_f * self.in_f
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.out_f, self.in_f, 1, 1]
    }
}

/// Max pooling window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolSpec {
    pub kernel: usize,
    pub stride: usize,
}

/// Activation shapes between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActShape {
    Chw(usize, usize, usize),
    Flat(usize),
}

impl ActShape {
    pub fn elems(&self) -> usize {
        match *self {
            ActShape::Chw(c, h, w) => c * h * w,
            ActShape::Flat(n) => n,
        }
    }
}

impl std::fmt::Display for ActShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match *self {
            ActShape::Chw(c, h, w) => write!(f, "{c}x{h}x{w}"),
            ActShape::Flat(n) => write!(f, "flat {n}"),
        }
    }
}

/// One activation buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Activation {
    pub shape: ActShape,
    pub data: Vec<f64>,
}

impl Activation {
    pub fn zeros(shape: ActShape) -> Self {
        Activation {
            data: vec![0.0; shape.elems()],
            shape,
        }
    }
}

pub(crate) fn conv_out_hw(spec: &ConvSpec, h: usize, w: usize) -> (usize, usize) {
    (
        (h + 2 * spec.padding - spec.kh) / spec.stride + 1,
        (w + 2 * spec.padding - spec.kw) / spec.stride + 1,
    )
}

pub(crate) fn pool_out_hw(spec: &PoolSpec, h: usize, w: usize) -> (usize, usize) {
    (
        (h - spec.kernel) / spec.stride + 1,
        (w - spec.kernel) / spec.stride + 1,
    )
}
