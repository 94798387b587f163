//! Zero-space SEC-DED protection for int8 CNN weights.
//!
//! The crate provides, bottom to top:
//!
//! * [`secded`] — extended Hamming (64,57,1) and shortened (72,64,1)
//!   codes with syndrome decoding.
//! * [`inplace`] — embedding of the seven (64,57,1) check bits into the
//!   non-informative bits of an 8-byte weight block, at zero space cost.
//! * [`quant`] — symmetric linear int8 quantization of weights and
//!   activations, int32 for biases.
//! * [`nn`] — a small float training / int8 inference engine with IDX and
//!   synthetic dataset loaders.
//! * [`wot`] — weight throttling: fine-tuning that moves every non-eighth
//!   weight of each block into `[-64, 63]` so blocks become encodable.
//! * [`fault`] — seeded bit-flip injection and the comparison of four
//!   protection strategies.
//! * [`store`] — the binary model container and CSV report writers.

pub mod fault;
pub mod inplace;
pub mod nn;
pub mod quant;
pub mod rng;
pub mod secded;
pub mod store;
pub mod wot;

pub use inplace::{has_noninformative_bit, ConstraintViolation, InPlaceCodec, WeightBlock};
pub use quant::{dequantize, quantize, quantize_bias, QuantizedBias, QuantizedTensor};
pub use secded::{CodeSpec, DecodeOutcome, SecDedCode};
