//! Weight-throttling fine-tuning.
//!
//! Quantization-aware training interleaved with a throttling step that
//! clamps every non-eighth weight of each 8-byte block into `[-64, 63]`,
//! so that after training every block can carry its own check bits.
//!
//! Each batch runs:
//!
//! 1. **QAT** — forward and backward on the quantized parameter values
//!    (gradients straight through the quantizer), then an SGD step on the
//!    float shadow parameters and a re-quantization.
//! 2. **Throttling** — clamp out-of-range quantized weights at non-eighth
//!    positions to the nearest bound and write the clamped value times the
//!    scale back into the float shadow.
//!
//! Training stops once the post-throttle int8 accuracy reaches the 8-bit
//! baseline (within 0.01 percentage points) at an evaluation point, or at
//! the epoch cap.

use crate::nn::{
    dequantize_model, eval_int8, Dataset, FloatLayer, FloatModel, QuantLayer, QuantModel,
};
use crate::quant::QuantizedTensor;
use crate::rng::{self, stream};

/// Hyperparameters for throttled fine-tuning.
#[derive(Debug, Clone, Copy)]
pub struct WotConfig {
    /// Weight of the squared Frobenius norm term in the loss.
    pub lambda: f64,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// The 8-bit quantized baseline accuracy to recover, in `[0, 1]`.
    pub target_accuracy: f64,
    pub seed: u64,
    /// Evaluate census and accuracy every this many iterations.
    pub eval_interval: u64,
}

impl Default for WotConfig {
    fn default() -> Self {
        WotConfig {
            lambda: 1e-4,
            lr: 1e-4,
            momentum: 0.9,
            batch_size: 32,
            max_epochs: 20,
            target_accuracy: 1.0,
            seed: 42,
            eval_interval: 200,
        }
    }
}

/// "Reaches the baseline" tolerance: 0.01 percentage points.
pub const TARGET_TOLERANCE: f64 = 1e-4;

/// Counts of quantized weights outside `[-64, 63]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Census {
    /// Large values at non-eighth block positions (the ones that block
    /// in-place encoding), summed over all layers.
    pub large_count: u64,
    /// Large values by position within the 8-byte block, eighth position
    /// included.
    pub by_position: [u64; 8],
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CensusRecord {
    pub iteration: u64,
    /// Pre-throttle large-value count at non-eighth positions.
    pub large_count: u64,
    pub acc_before: f64,
    pub acc_after: f64,
}

/// Result of a fine-tuning run. `converged == false` means the epoch cap
/// was hit first; the best-seen model is returned either way and always
/// satisfies the block constraint.
#[derive(Debug, Clone)]
pub struct WotOutcome {
    pub model: QuantModel,
    pub float_model: FloatModel,
    pub records: Vec<CensusRecord>,
    pub converged: bool,
    pub iterations: u64,
    pub baseline_accuracy: f64,
    pub final_accuracy: f64,
}

/// Clamp every value at a non-eighth flattened position into `[-64, 63]`.
/// Eighth positions and in-range values are untouched; idempotent.
pub fn throttle(q: &QuantizedTensor) -> QuantizedTensor {
    let mut out = q.clone();
    for (i, v) in out.values.iter_mut().enumerate() {
        if i % 8 != 7 {
            *v = (*v).clamp(-64, 63);
        }
    }
    out
}

/// Write throttled values back into the float shadow: wherever the
/// quantized value changed, the float weight becomes the new value times
/// the scale; everything else is untouched.
pub fn sync_float_from_throttle(
    weights: &mut [f64],
    pre: &QuantizedTensor,
    post: &QuantizedTensor,
) {
    assert_eq!(weights.len(), pre.values.len());
    assert_eq!(pre.values.len(), post.values.len());
    for ((w, &a), &b) in weights
        .iter_mut()
        .zip(pre.values.iter())
        .zip(post.values.iter())
    {
        if a != b {
            *w = b as f64 * post.scale;
        }
    }
}

/// Census of one tensor.
pub fn census_tensor(q: &QuantizedTensor) -> Census {
    let mut census = Census::default();
    for (i, &v) in q.values.iter().enumerate() {
        if !crate::inplace::has_noninformative_bit(v) {
            census.by_position[i % 8] += 1;
            if i % 8 != 7 {
                census.large_count += 1;
            }
        }
    }
    census
}

/// Census over all weight tensors of a model.
pub fn census(model: &QuantModel) -> Census {
    let mut total = Census::default();
    for t in model.weight_tensors() {
        let c = census_tensor(t);
        total.large_count += c.large_count;
        for (a, b) in total.by_position.iter_mut().zip(c.by_position.iter()) {
            *a += b;
        }
    }
    total
}

fn throttle_model(qm: &QuantModel) -> QuantModel {
    let mut out = qm.clone();
    for layer in &mut out.layers {
        if let QuantLayer::Conv2d { weight, .. } | QuantLayer::Linear { weight, .. } = layer {
            *weight = throttle(weight);
        }
    }
    out
}

fn sync_model(fm: &mut FloatModel, pre: &QuantModel, post: &QuantModel) {
    let mut params = Vec::new();
    for layer in &mut fm.layers {
        if let FloatLayer::Conv2d { weight, .. } | FloatLayer::Linear { weight, .. } = layer {
            params.push(weight);
        }
    }
    let pre_w = pre.weight_tensors();
    let post_w = post.weight_tensors();
    assert_eq!(params.len(), pre_w.len());
    for ((w, a), b) in params.into_iter().zip(pre_w.iter()).zip(post_w.iter()) {
        sync_float_from_throttle(w, a, b);
    }
}

/// Fine-tune until the post-throttle accuracy reaches the baseline.
///
/// The float model must already be pre-trained; `cfg.target_accuracy` is
/// the measured accuracy of its 8-bit quantized version. Activation
/// scales are calibrated once on the first `cfg.batch_size` training
/// images and stay fixed through the run.
pub fn wot_train(
    model: &FloatModel,
    train: &Dataset,
    test: &Dataset,
    cfg: &WotConfig,
) -> WotOutcome {
    use crate::nn::quantize_model;

    let calib_count = cfg.batch_size.min(train.count);
    let calib: Vec<&[u8]> = (0..calib_count).map(|i| train.image(i)).collect();
    let scales = quantize_model(model, &calib);
    let test_refs = test.image_refs();

    let mut fm = model.clone();
    let mut records: Vec<CensusRecord> = Vec::new();
    // Best post-throttle model seen so far.
    let mut best: Option<(f64, QuantModel, FloatModel)> = None;

    let snapshot = |fm: &FloatModel| requantize_with(&scales, fm);

    let evaluate = |fm: &mut FloatModel,
                    iteration: u64,
                    records: &mut Vec<CensusRecord>,
                    best: &mut Option<(f64, QuantModel, FloatModel)>|
     -> bool {
        let q = snapshot(fm);
        let cens = census(&q);
        let acc_before = eval_int8(&q, &test_refs, &test.labels);
        let post = throttle_model(&q);
        sync_model(fm, &q, &post);
        let acc_after = eval_int8(&post, &test_refs, &test.labels);
        records.push(CensusRecord {
            iteration,
            large_count: cens.large_count,
            acc_before,
            acc_after,
        });
        if best.as_ref().is_none_or(|(a, _, _)| acc_after > *a) {
            *best = Some((acc_after, post, fm.clone()));
        }
        acc_after >= cfg.target_accuracy - TARGET_TOLERANCE
    };

    let mut iteration = 0u64;
    let mut converged = evaluate(&mut fm, 0, &mut records, &mut best);

    if !converged {
        let mut shuffle_rng = rng::seeded(cfg.seed, stream::WOT_SHUFFLE);
        let mut sgd = crate::nn::SgdState::new(&fm, cfg.lr, cfg.momentum);
        let mut order: Vec<usize> = (0..train.count).collect();

        'training: for _epoch in 0..cfg.max_epochs {
            rng::shuffle(&mut shuffle_rng, &mut order);
            for chunk in order.chunks(cfg.batch_size) {
                // QAT step: gradients of the loss at the quantized
                // parameter values, applied to the float parameters.
                let fake = dequantize_model(&snapshot(&fm));
                let (inputs, labels) = crate::nn::batch_inputs(train, chunk, fm.input);
                let (_, grads) = fake.loss_and_grads(&inputs, &labels, cfg.lambda);
                sgd.step(&mut fm, &grads);
                iteration += 1;

                if iteration.is_multiple_of(cfg.eval_interval) {
                    if evaluate(&mut fm, iteration, &mut records, &mut best) {
                        converged = true;
                        break 'training;
                    }
                } else {
                    // Throttling step without the logging.
                    let q = snapshot(&fm);
                    let post = throttle_model(&q);
                    sync_model(&mut fm, &q, &post);
                }
            }
        }
        // Close the log with the final state unless it was just recorded.
        if !converged && records.last().map(|r| r.iteration) != Some(iteration) {
            converged = evaluate(&mut fm, iteration, &mut records, &mut best);
        }
    }

    let (final_accuracy, model, float_model) = best.expect("at least one evaluation ran");
    WotOutcome {
        model,
        float_model,
        records,
        converged,
        iterations: iteration,
        baseline_accuracy: cfg.target_accuracy,
        final_accuracy,
    }
}

/// Quantize the parameters of `fm` against the fixed activation scales of
/// `scales` (weight scales are recomputed from the current floats).
fn requantize_with(scales: &QuantModel, fm: &FloatModel) -> QuantModel {
    use crate::quant;
    let mut act_scale = scales.input_scale;
    let mut scale_iter = scales.layers.iter();
    let layers = fm
        .layers
        .iter()
        .map(|layer| {
            let tmpl = scale_iter.next().expect("same layer count");
            match (layer, tmpl) {
                (
                    FloatLayer::Conv2d { spec, weight, bias },
                    QuantLayer::Conv2d { out_scale, .. },
                ) => {
                    let w = quant::quantize(weight, spec.dims().to_vec(), 8).expect("finite");
                    let b = quant::quantize_bias(bias, w.scale * act_scale).expect("fits int32");
                    act_scale = *out_scale;
                    QuantLayer::Conv2d {
                        spec: *spec,
                        weight: w,
                        bias: b,
                        out_scale: *out_scale,
                    }
                }
                (
                    FloatLayer::Linear { spec, weight, bias },
                    QuantLayer::Linear { out_scale, .. },
                ) => {
                    let w = quant::quantize(weight, spec.dims().to_vec(), 8).expect("finite");
                    let b = quant::quantize_bias(bias, w.scale * act_scale).expect("fits int32");
                    act_scale = *out_scale;
                    QuantLayer::Linear {
                        spec: *spec,
                        weight: w,
                        bias: b,
                        out_scale: *out_scale,
                    }
                }
                (FloatLayer::Relu, _) => QuantLayer::Relu,
                (FloatLayer::MaxPool2d(spec), _) => QuantLayer::MaxPool2d(*spec),
                (FloatLayer::Flatten, _) => QuantLayer::Flatten,
                _ => panic!("float model diverged from calibration template"),
            }
        })
        .collect();
    QuantModel {
        input: fm.input,
        input_scale: scales.input_scale,
        layers,
    }
}

/// Write the census log as CSV: `iteration,large_count,acc_before_throttle,
/// acc_after_throttle`.
pub fn write_census_csv<W: std::io::Write>(
    out: &mut W,
    records: &[CensusRecord],
) -> std::io::Result<()> {
    writeln!(
        out,
        "iteration,large_count,acc_before_throttle,acc_after_throttle"
    )?;
    for r in records {
        writeln!(
            out,
            "{},{},{:.6},{:.6}",
            r.iteration, r.large_count, r.acc_before, r.acc_after
        )?;
    }
    Ok(())
}

/// Write the large-weight position histogram as CSV: `position,large_count`,
/// one row per byte position within the 8-byte block.
pub fn write_histogram_csv<W: std::io::Write>(out: &mut W, census: &Census) -> std::io::Result<()> {
    writeln!(out, "position,large_count")?;
    for (position, count) in census.by_position.iter().enumerate() {
        writeln!(out, "{position},{count}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{generate_synthetic, quantize_model, train_float, SgdConfig};
    use crate::rng::{draw_below, seeded};

    fn qt(values: Vec<i8>, scale: f64) -> QuantizedTensor {
        let shape = vec![values.len()];
        QuantizedTensor {
            values,
            shape,
            scale,
        }
    }

    #[test]
    fn throttle_clamps_large_values() {
        let q = qt(vec![70, 0, 0, 0, 0, 0, 0, 0], 1.0);
        assert_eq!(throttle(&q).values, vec![63, 0, 0, 0, 0, 0, 0, 0]);
    }

    #[test]
    fn throttle_exempts_eighth_position() {
        let q = qt(vec![0, 0, 0, 0, 0, 0, 0, 100], 1.0);
        assert_eq!(throttle(&q).values, q.values);
    }

    #[test]
    fn throttle_clamp_semantics() {
        let q = qt(vec![-70, -64, 63, 0, 0, 0, 0, -128], 1.0);
        assert_eq!(throttle(&q).values, vec![-64, -64, 63, 0, 0, 0, 0, -128]);
    }

    #[test]
    fn throttle_idempotent_and_minimal() {
        let mut rng = seeded(31, 0);
        for _ in 0..2000 {
            let n = 1 + draw_below(&mut rng, 40) as usize;
            let values: Vec<i8> = (0..n)
                .map(|_| (draw_below(&mut rng, 256) as i64 - 128) as i8)
                .collect();
            let q = qt(values, 0.25);
            let t = throttle(&q);
            assert_eq!(throttle(&t), t, "idempotence");
            for (i, (&a, &b)) in q.values.iter().zip(t.values.iter()).enumerate() {
                if i % 8 == 7 || (-64..=63).contains(&a) {
                    assert_eq!(a, b, "untouched value changed at {i}");
                } else {
                    assert_eq!(b, if a > 63 { 63 } else { -64 }, "nearest bound at {i}");
                }
            }
        }
    }

    #[test]
    fn sync_updates_only_changed_values() {
        let pre = qt(vec![70, 10, 0, 0, 0, 0, 0, 0], 0.5);
        let post = throttle(&pre);
        let mut weights = vec![35.0, 5.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let orig = weights.clone();
        sync_float_from_throttle(&mut weights, &pre, &post);
        assert_eq!(weights[0], 63.0 * 0.5);
        assert_eq!(&weights[1..], &orig[1..]);
        // Second sync against identical tensors is a no-op.
        let before = weights.clone();
        sync_float_from_throttle(&mut weights, &post, &post);
        assert_eq!(weights, before);
    }

    #[test]
    fn census_counts_and_buckets() {
        let q = qt(vec![0i8; 16], 1.0);
        assert_eq!(census_tensor(&q), Census::default());

        let mut values = vec![0i8; 16];
        values[13] = 70; // 13 % 8 == 5
        let q = qt(values, 1.0);
        let c = census_tensor(&q);
        assert_eq!(c.large_count, 1);
        assert_eq!(c.by_position[5], 1);

        // Eighth-position large values show in the histogram but not in
        // the blocking count.
        let mut values = vec![0i8; 16];
        values[7] = -100;
        let c = census_tensor(&qt(values, 1.0));
        assert_eq!(c.large_count, 0);
        assert_eq!(c.by_position[7], 1);
    }

    #[test]
    fn census_matches_brute_force_scan() {
        let mut rng = seeded(33, 0);
        for _ in 0..200 {
            let n = 1 + draw_below(&mut rng, 100) as usize;
            let values: Vec<i8> = (0..n)
                .map(|_| (draw_below(&mut rng, 256) as i64 - 128) as i8)
                .collect();
            let q = qt(values.clone(), 1.0);
            let c = census_tensor(&q);
            let expected = values
                .iter()
                .enumerate()
                .filter(|&(i, &v)| i % 8 != 7 && !(-64..=63).contains(&v))
                .count() as u64;
            assert_eq!(c.large_count, expected);
            assert_eq!(
                c.by_position.iter().sum::<u64>() as usize,
                values.iter().filter(|&&v| !(-64..=63).contains(&v)).count()
            );
        }
    }

    fn trained_setup() -> (crate::nn::FloatModel, Dataset, Dataset) {
        let pool = generate_synthetic(42, 10, 300);
        let (train, test) = pool.split(240);
        let mut model = crate::nn::FloatModel::reference(42);
        train_float(&mut model, &train, &SgdConfig::default());
        (model, train, test)
    }

    #[test]
    fn compliant_model_returns_in_one_evaluation() {
        let (model, train, test) = trained_setup();
        // Pre-throttle the floats until re-quantization is stable: each
        // clamp can shrink a tensor's max and thus its scale, so a single
        // pass is not enough.
        let calib: Vec<&[u8]> = (0..32).map(|i| train.image(i)).collect();
        let mut fm = model.clone();
        let mut compliant = quantize_model(&fm, &calib);
        for _ in 0..50 {
            let q = quantize_model(&fm, &calib);
            if census(&q).large_count == 0 {
                compliant = q;
                break;
            }
            let post = throttle_model(&q);
            sync_model(&mut fm, &q, &post);
        }
        assert_eq!(census(&compliant).large_count, 0, "fixpoint not reached");
        let test_refs = test.image_refs();
        let baseline = eval_int8(&compliant, &test_refs, &test.labels);

        let cfg = WotConfig {
            target_accuracy: baseline,
            batch_size: 32,
            ..Default::default()
        };
        let out = wot_train(&fm, &train, &test, &cfg);
        assert!(out.converged);
        assert_eq!(out.records.len(), 1);
        assert_eq!(out.records[0].large_count, 0);
        assert_eq!(out.iterations, 0);
        assert_eq!(census(&out.model).large_count, 0);
    }

    #[test]
    fn wot_reaches_baseline_and_clears_census() {
        let (model, train, test) = trained_setup();
        let calib: Vec<&[u8]> = (0..32).map(|i| train.image(i)).collect();
        let q = quantize_model(&model, &calib);
        let test_refs = test.image_refs();
        let baseline = eval_int8(&q, &test_refs, &test.labels);
        let initial_census = census(&q).large_count;

        let cfg = WotConfig {
            target_accuracy: baseline,
            max_epochs: 6,
            eval_interval: 10,
            lr: 1e-3,
            ..Default::default()
        };
        let out = wot_train(&model, &train, &test, &cfg);
        assert!(
            out.converged,
            "baseline {baseline} not reached: {:?}",
            out.records
        );
        assert!(out.final_accuracy >= baseline - TARGET_TOLERANCE);
        // The returned model satisfies the block constraint everywhere.
        assert_eq!(census(&out.model).large_count, 0);
        let codec = crate::inplace::InPlaceCodec::new();
        for t in out.model.weight_tensors() {
            assert!(codec.protect_tensor(t).is_ok());
        }
        // The log starts from the unthrottled census, which must be a
        // real reduction target, and ends compliant.
        assert_eq!(out.records[0].large_count, initial_census);
        assert!(
            initial_census > 0,
            "fixture model has no large values to regularize"
        );
        assert!(out.records.last().unwrap().large_count <= initial_census);
    }
}
