//! Symmetric range-based linear quantization.
//!
//! Weights and activations quantize to int8 with a single per-tensor
//! scale `max|x| / 127`; biases quantize to int32 against the scale of
//! the accumulator they are added into. Rounding is half-away-from-zero
//! so that quantization commutes with negation.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum QuantError {
    #[error("input contains a non-finite value at index {0}")]
    NonFinite(usize),
    #[error("bias value {value} at index {index} does not fit in 32 bits at scale {scale}")]
    BiasOverflow {
        index: usize,
        value: f64,
        scale: f64,
    },
    #[error("unsupported bit width {0} (supported: 2..=8)")]
    UnsupportedBits(u32),
}

/// An int8 tensor with its dequantization scale.
///
/// The flattened order is row-major over `shape`; all block-level
/// protection operates on that order.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub values: Vec<i8>,
    pub shape: Vec<usize>,
    pub scale: f64,
}

impl QuantizedTensor {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// An int32 bias vector with its scale.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedBias {
    pub values: Vec<i32>,
    pub scale: f64,
}

/// Quantize `x` to `n`-bit signed values: `round(x * (2^(n-1)-1) / max|x|)`.
/// A zero tensor gets scale 1 by convention. The output range is
/// `[-(2^(n-1)-1), 2^(n-1)-1]`; the most negative n-bit value never occurs.
pub fn quantize(x: &[f64], shape: Vec<usize>, n: u32) -> Result<QuantizedTensor, QuantError> {
    if !(2..=8).contains(&n) {
        return Err(QuantError::UnsupportedBits(n));
    }
    if let Some(i) = x.iter().position(|v| !v.is_finite()) {
        return Err(QuantError::NonFinite(i));
    }
    debug_assert_eq!(shape.iter().product::<usize>(), x.len());
    let qmax = ((1u32 << (n - 1)) - 1) as f64;
    let max_abs = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = if max_abs == 0.0 { 1.0 } else { max_abs / qmax };
    let values = x
        .iter()
        .map(|&v| {
            if max_abs == 0.0 {
                0
            } else {
                (v * qmax / max_abs).round() as i8
            }
        })
        .collect();
    Ok(QuantizedTensor {
        values,
        shape,
        scale,
    })
}

/// Elementwise `values * scale`.
pub fn dequantize(q: &QuantizedTensor) -> Vec<f64> {
    q.values.iter().map(|&v| v as f64 * q.scale).collect()
}

/// Quantize a bias vector to int32 against a fixed scale (weight scale
/// times input-activation scale for int32 accumulation).
pub fn quantize_bias(b: &[f64], scale: f64) -> Result<QuantizedBias, QuantError> {
    assert!(scale > 0.0, "bias scale must be positive");
    let mut values = Vec::with_capacity(b.len());
    for (i, &v) in b.iter().enumerate() {
        if !v.is_finite() {
            return Err(QuantError::NonFinite(i));
        }
        let q = (v / scale).round();
        if q.abs() >= 2f64.powi(31) {
            return Err(QuantError::BiasOverflow {
                index: i,
                value: v,
                scale,
            });
        }
        values.push(q as i32);
    }
    Ok(QuantizedBias { values, scale })
}

/// `values * scale` for a bias vector.
pub fn dequantize_bias(b: &QuantizedBias) -> Vec<f64> {
    b.values.iter().map(|&v| v as f64 * b.scale).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_evaluated_example() {
        // 0.5 * 127 = 63.5 rounds away from zero to 64.
        let q = quantize(&[-1.0, 0.5, 0.25], vec![3], 8).unwrap();
        assert_eq!(q.values, vec![-127, 64, 32]);
        assert!((q.scale - 1.0 / 127.0).abs() < 1e-15);
    }

    #[test]
    fn zero_tensor_uses_unit_scale() {
        let q = quantize(&[0.0; 4], vec![4], 8).unwrap();
        assert_eq!(q.values, vec![0; 4]);
        assert_eq!(q.scale, 1.0);
    }

    #[test]
    fn non_finite_rejected() {
        assert_eq!(
            quantize(&[1.0, f64::NAN], vec![2], 8),
            Err(QuantError::NonFinite(1))
        );
        assert_eq!(
            quantize(&[f64::INFINITY], vec![1], 8),
            Err(QuantError::NonFinite(0))
        );
    }

    #[test]
    fn dequantize_round_trip_examples() {
        let q = QuantizedTensor {
            values: vec![127],
            shape: vec![1],
            scale: 1.0 / 127.0,
        };
        assert!((dequantize(&q)[0] - 1.0).abs() < 1e-15);
        let q = QuantizedTensor {
            values: vec![0, 0],
            shape: vec![2],
            scale: 3.0,
        };
        assert_eq!(dequantize(&q), vec![0.0, 0.0]);
    }

    #[test]
    fn bias_quantization() {
        let b = quantize_bias(&[0.0, 0.0], 0.5).unwrap();
        assert_eq!(b.values, vec![0, 0]);
        let b = quantize_bias(&[0.5], 0.01).unwrap();
        assert_eq!(b.values, vec![50]);
        assert!(matches!(
            quantize_bias(&[3.0e9], 1.0),
            Err(QuantError::BiasOverflow { index: 0, .. })
        ));
    }

    proptest! {
        #[test]
        fn symmetry_range_and_reconstruction(
            xs in prop::collection::vec(-1000.0f64..1000.0, 1..64)
        ) {
            let q = quantize(&xs, vec![xs.len()], 8).unwrap();
            let neg: Vec<f64> = xs.iter().map(|v| -v).collect();
            let qn = quantize(&neg, vec![neg.len()], 8).unwrap();
            // Symmetry: quantize(-x) = -quantize(x) elementwise.
            for (a, b) in q.values.iter().zip(qn.values.iter()) {
                prop_assert_eq!(*a as i16, -(*b as i16));
            }
            // Range excludes -128.
            for &v in &q.values {
                prop_assert!((-127..=127).contains(&v));
            }
            // Reconstruction error at most scale/2 (with float slack).
            let back = dequantize(&q);
            for (orig, rec) in xs.iter().zip(back.iter()) {
                prop_assert!((orig - rec).abs() <= q.scale * 0.5 * (1.0 + 1e-9));
            }
        }
    }
}
