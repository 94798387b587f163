//! Bit-flip fault injection and protection strategies.
//!
//! A protected model is the memory image of a quantized model under one
//! of four strategies:
//!
//! * `faulty` — raw weight bytes, no redundancy.
//! * `zero` — one even-parity bit per weight byte in a redundancy array;
//!   a weight whose parity check fails on read is set to zero.
//! * `ecc` — the standard (72,64,1) layout: 8-byte data blocks plus one
//!   check byte per block in a redundancy array.
//! * `in-place` — (64,57,1) check bits embedded in the blocks themselves;
//!   no redundancy array.
//!
//! Faults are uniform random bit flips over the stored weight bits
//! (payload plus redundancy under [`FaultScope::AllStoredBits`], payload
//! only under [`FaultScope::WeightBitsOnly`]), with the flip count
//! `round(bits * rate)`. Bias arrays ride along ECC-protected but are
//! never fault-injected: they are not part of the weight memory under
//! test.

use crate::inplace::{pad_weights, ConstraintViolation, InPlaceCodec};
use crate::nn::{eval_int8, Dataset, QuantLayer, QuantModel};
use crate::quant::{QuantizedBias, QuantizedTensor};
use crate::rng::{self, draw_below, stream};
use crate::secded::{DecodeCounters, SecDedCode};
use std::collections::HashSet;
use std::fmt;

/// Which stored bits the fault model may hit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultScope {
    /// Weight payload and redundancy arrays: check bits are memory too.
    AllStoredBits,
    /// Weight payload only.
    WeightBitsOnly,
}

impl fmt::Display for FaultScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FaultScope::AllStoredBits => write!(f, "all-stored-bits"),
            FaultScope::WeightBitsOnly => write!(f, "weight-bits-only"),
        }
    }
}

/// A fault model: rate, seed, and scope.
#[derive(Debug, Clone, Copy)]
pub struct FaultModel {
    /// Fraction of in-scope bits flipped, in `[0, 1]`.
    pub rate: f64,
    pub seed: u64,
    pub scope: FaultScope,
}

/// The four protection strategies under comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ProtectionStrategy {
    Faulty,
    ParityZero,
    StandardEcc,
    InPlace,
}

impl ProtectionStrategy {
    pub const ALL: [ProtectionStrategy; 4] = [
        ProtectionStrategy::Faulty,
        ProtectionStrategy::ParityZero,
        ProtectionStrategy::StandardEcc,
        ProtectionStrategy::InPlace,
    ];

    /// Short name used in CLI flags and CSV columns.
    pub fn name(&self) -> &'static str {
        match self {
            ProtectionStrategy::Faulty => "faulty",
            ProtectionStrategy::ParityZero => "zero",
            ProtectionStrategy::StandardEcc => "ecc",
            ProtectionStrategy::InPlace => "in-place",
        }
    }

    pub fn parse(s: &str) -> Option<ProtectionStrategy> {
        match s {
            "faulty" => Some(ProtectionStrategy::Faulty),
            "zero" | "parity-zero" => Some(ProtectionStrategy::ParityZero),
            "ecc" | "standard-ecc" => Some(ProtectionStrategy::StandardEcc),
            "in-place" | "inplace" => Some(ProtectionStrategy::InPlace),
            _ => None,
        }
    }
}

impl fmt::Display for ProtectionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One protected weight tensor: payload padded to whole 8-byte blocks,
/// plus the strategy's redundancy array.
#[derive(Debug, Clone, PartialEq)]
pub struct ProtectedTensor {
    pub payload: Vec<u8>,
    pub redundancy: Vec<u8>,
    pub pad: u8,
    pub shape: Vec<usize>,
    pub scale: f64,
}

/// A bias vector stored as little-endian int32 bytes with standard
/// (72,64,1) redundancy (except under `faulty`, which stores raw bytes).
#[derive(Debug, Clone, PartialEq)]
pub struct ProtectedBias {
    pub payload: Vec<u8>,
    pub redundancy: Vec<u8>,
    pub pad: u8,
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProtectedLayer {
    Conv2d {
        spec: crate::nn::ConvSpec,
        weight: ProtectedTensor,
        bias: ProtectedBias,
        out_scale: f64,
    },
    Linear {
        spec: crate::nn::LinearSpec,
        weight: ProtectedTensor,
        bias: ProtectedBias,
        out_scale: f64,
    },
    Relu,
    MaxPool2d(crate::nn::PoolSpec),
    Flatten,
}

/// The full memory image of a protected model.
#[derive(Debug, Clone, PartialEq)]
pub struct ProtectedModel {
    pub strategy: ProtectionStrategy,
    pub input: (usize, usize, usize),
    pub input_scale: f64,
    pub layers: Vec<ProtectedLayer>,
}

impl ProtectedModel {
    pub fn weight_tensors(&self) -> Vec<&ProtectedTensor> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                ProtectedLayer::Conv2d { weight, .. } | ProtectedLayer::Linear { weight, .. } => {
                    Some(weight)
                }
                _ => None,
            })
            .collect()
    }

    /// Stored weight payload bytes (padded blocks).
    pub fn payload_bytes(&self) -> usize {
        self.weight_tensors().iter().map(|t| t.payload.len()).sum()
    }

    /// Strategy redundancy bytes for the weights.
    pub fn redundancy_bytes(&self) -> usize {
        self.weight_tensors()
            .iter()
            .map(|t| t.redundancy.len())
            .sum()
    }

    /// Space overhead of the strategy: extra bytes over stored weight
    /// bytes, as a percentage.
    pub fn space_overhead_pct(&self) -> f64 {
        match self.payload_bytes() {
            0 => 0.0,
            payload => 100.0 * self.redundancy_bytes() as f64 / payload as f64,
        }
    }
}

/// Flip exactly `round(bits.len() * 8 * rate)` distinct bit positions,
/// sampled uniformly without replacement from the seeded generator.
/// Returns the flipped positions in draw order.
pub fn inject(bits: &mut [u8], model: &FaultModel) -> Vec<u64> {
    assert!((0.0..=1.0).contains(&model.rate), "rate in [0, 1]");
    let total_bits = bits.len() as u64 * 8;
    let flips = (total_bits as f64 * model.rate).round() as u64;
    assert!(flips <= total_bits);
    let mut rng = rng::seeded(model.seed, stream::FAULT_INJECT);
    let mut chosen = HashSet::with_capacity(flips as usize);
    let mut positions = Vec::with_capacity(flips as usize);
    while (positions.len() as u64) < flips {
        let pos = draw_below(&mut rng, total_bits);
        if chosen.insert(pos) {
            positions.push(pos);
            bits[(pos / 8) as usize] ^= 1 << (pos % 8);
        }
    }
    positions
}

fn standard_code() -> SecDedCode {
    SecDedCode::new(64).expect("(72,64,1) is a supported code")
}

/// Standard (72,64,1) block storage: 8 data bytes in place, one check
/// byte per block in the redundancy array. Data bit `i` of a block (bit
/// `i % 8` of byte `i / 8`) maps to the code's `data_positions[i]`; check
/// byte bit `j` maps to `check_positions[j]`.
pub struct StandardBlockCodec {
    code: SecDedCode,
}

impl StandardBlockCodec {
    pub fn new() -> Self {
        StandardBlockCodec {
            code: standard_code(),
        }
    }

    pub fn encode_block(&self, data: &[u8; 8]) -> u8 {
        let word = self.assemble(data, 0);
        let coded = self
            .code
            .encode(self.extract_data_bits(word))
            .expect("64-bit data");
        let mut check = 0u8;
        for (j, &p) in self.code.structure().check_positions.iter().enumerate() {
            if coded >> (p - 1) & 1 == 1 {
                check |= 1 << j;
            }
        }
        check
    }

    pub fn decode_block(
        &self,
        data: &[u8; 8],
        check: u8,
    ) -> ([u8; 8], crate::secded::DecodeOutcome) {
        let word = self.assemble(data, check);
        let (decoded, outcome) = self.code.decode(word).expect("72-bit word");
        (decoded.to_le_bytes()[..8].try_into().unwrap(), outcome)
    }

    fn assemble(&self, data: &[u8; 8], check: u8) -> u128 {
        let bits = u64::from_le_bytes(*data);
        let structure = self.code.structure();
        let mut word = 0u128;
        for (i, &p) in structure.data_positions.iter().enumerate() {
            if bits >> i & 1 == 1 {
                word |= 1u128 << (p - 1);
            }
        }
        for (j, &p) in structure.check_positions.iter().enumerate() {
            if check >> j & 1 == 1 {
                word |= 1u128 << (p - 1);
            }
        }
        word
    }

    fn extract_data_bits(&self, word: u128) -> u128 {
        let mut data = 0u128;
        for (i, &p) in self.code.structure().data_positions.iter().enumerate() {
            if word >> (p - 1) & 1 == 1 {
                data |= 1u128 << i;
            }
        }
        data
    }
}

impl Default for StandardBlockCodec {
    fn default() -> Self {
        StandardBlockCodec::new()
    }
}

/// Even-parity bit of a byte.
fn parity_bit(byte: u8) -> u8 {
    (byte.count_ones() & 1) as u8
}

fn protect_weights(
    t: &QuantizedTensor,
    strategy: ProtectionStrategy,
) -> Result<ProtectedTensor, ConstraintViolation> {
    let (payload, redundancy, pad) = match strategy {
        ProtectionStrategy::Faulty => {
            let (padded, pad) = pad_weights(&t.values);
            (
                padded.iter().map(|&v| v as u8).collect::<Vec<u8>>(),
                Vec::new(),
                pad,
            )
        }
        ProtectionStrategy::ParityZero => {
            let (padded, pad) = pad_weights(&t.values);
            let payload: Vec<u8> = padded.iter().map(|&v| v as u8).collect();
            // One parity bit per weight byte, packed LSB-first.
            let mut redundancy = vec![0u8; payload.len() / 8];
            for (i, &b) in payload.iter().enumerate() {
                redundancy[i / 8] |= parity_bit(b) << (i % 8);
            }
            (payload, redundancy, pad)
        }
        ProtectionStrategy::StandardEcc => {
            let (padded, pad) = pad_weights(&t.values);
            let payload: Vec<u8> = padded.iter().map(|&v| v as u8).collect();
            let codec = StandardBlockCodec::new();
            let redundancy: Vec<u8> = payload
                .chunks_exact(8)
                .map(|chunk| codec.encode_block(chunk.try_into().unwrap()))
                .collect();
            (payload, redundancy, pad)
        }
        ProtectionStrategy::InPlace => {
            let codec = InPlaceCodec::new();
            let (payload, pad) = codec.protect_tensor(t)?;
            (payload, Vec::new(), pad)
        }
    };
    Ok(ProtectedTensor {
        payload,
        redundancy,
        pad,
        shape: t.shape.clone(),
        scale: t.scale,
    })
}

/// Biases are stored as int32 little-endian bytes, by default with
/// standard (72,64,1) check bytes; they are outside the fault scope
/// either way.
fn protect_bias(b: &QuantizedBias, with_ecc: bool) -> ProtectedBias {
    let mut payload: Vec<u8> = b.values.iter().flat_map(|v| v.to_le_bytes()).collect();
    let pad = (8 - payload.len() % 8) % 8;
    payload.resize(payload.len() + pad, 0);
    let redundancy = if with_ecc {
        let codec = StandardBlockCodec::new();
        payload
            .chunks_exact(8)
            .map(|chunk| codec.encode_block(chunk.try_into().unwrap()))
            .collect()
    } else {
        Vec::new()
    };
    ProtectedBias {
        payload,
        redundancy,
        pad: pad as u8,
        scale: b.scale,
    }
}

/// Build the memory image of `qm` under `strategy`, with biases carried
/// under standard (72,64,1) protection for every strategy except
/// `faulty`. In-place protection requires a throttled model and
/// propagates the violation otherwise.
pub fn apply_strategy_store(
    qm: &QuantModel,
    strategy: ProtectionStrategy,
) -> Result<ProtectedModel, ConstraintViolation> {
    apply_strategy_store_with(qm, strategy, strategy != ProtectionStrategy::Faulty)
}

/// [`apply_strategy_store`] with an explicit choice of bias protection.
pub fn apply_strategy_store_with(
    qm: &QuantModel,
    strategy: ProtectionStrategy,
    bias_ecc: bool,
) -> Result<ProtectedModel, ConstraintViolation> {
    let layers = qm
        .layers
        .iter()
        .map(|layer| {
            Ok(match layer {
                QuantLayer::Conv2d {
                    spec,
                    weight,
                    bias,
                    out_scale,
                } => ProtectedLayer::Conv2d {
                    spec: *spec,
                    weight: protect_weights(weight, strategy)?,
                    bias: protect_bias(bias, bias_ecc),
                    out_scale: *out_scale,
                },
                QuantLayer::Linear {
                    spec,
                    weight,
                    bias,
                    out_scale,
                } => ProtectedLayer::Linear {
                    spec: *spec,
                    weight: protect_weights(weight, strategy)?,
                    bias: protect_bias(bias, bias_ecc),
                    out_scale: *out_scale,
                },
                QuantLayer::Relu => ProtectedLayer::Relu,
                QuantLayer::MaxPool2d(spec) => ProtectedLayer::MaxPool2d(*spec),
                QuantLayer::Flatten => ProtectedLayer::Flatten,
            })
        })
        .collect::<Result<Vec<_>, ConstraintViolation>>()?;
    Ok(ProtectedModel {
        strategy,
        input: qm.input,
        input_scale: qm.input_scale,
        layers,
    })
}

fn recover_weights(
    t: &ProtectedTensor,
    strategy: ProtectionStrategy,
    counters: &mut DecodeCounters,
) -> QuantizedTensor {
    let values: Vec<i8> = match strategy {
        ProtectionStrategy::Faulty => t.payload.iter().map(|&b| b as i8).collect(),
        ProtectionStrategy::ParityZero => t
            .payload
            .iter()
            .enumerate()
            .map(|(i, &b)| {
                let stored = t.redundancy[i / 8] >> (i % 8) & 1;
                if parity_bit(b) == stored {
                    b as i8
                } else {
                    // Detected but not correctable: the weight is zeroed.
                    counters.detected_uncorrectable += 1;
                    0
                }
            })
            .collect(),
        ProtectionStrategy::StandardEcc => {
            let codec = StandardBlockCodec::new();
            let mut values = Vec::with_capacity(t.payload.len());
            for (block, &check) in t.payload.chunks_exact(8).zip(t.redundancy.iter()) {
                let (bytes, outcome) = codec.decode_block(block.try_into().unwrap(), check);
                counters.record(outcome);
                values.extend(bytes.iter().map(|&b| b as i8));
            }
            values
        }
        ProtectionStrategy::InPlace => {
            let codec = InPlaceCodec::new();
            let payload_len = t.payload.len();
            let (values, c) = codec.unprotect_tensor(&t.payload, 0);
            debug_assert_eq!(values.len(), payload_len);
            counters.merge(c);
            values
        }
    };
    let mut values = values;
    values.truncate(values.len() - t.pad as usize);
    QuantizedTensor {
        values,
        shape: t.shape.clone(),
        scale: t.scale,
    }
}

fn recover_bias(b: &ProtectedBias, counters: &mut DecodeCounters) -> QuantizedBias {
    let bytes: Vec<u8> = if b.redundancy.is_empty() {
        b.payload.clone()
    } else {
        let codec = StandardBlockCodec::new();
        let mut out = Vec::with_capacity(b.payload.len());
        for (block, &check) in b.payload.chunks_exact(8).zip(b.redundancy.iter()) {
            let (bytes, outcome) = codec.decode_block(block.try_into().unwrap(), check);
            counters.record(outcome);
            out.extend_from_slice(&bytes);
        }
        out
    };
    let data = &bytes[..bytes.len() - b.pad as usize];
    let values = data
        .chunks_exact(4)
        .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    QuantizedBias {
        values,
        scale: b.scale,
    }
}

/// Read the memory image back into a quantized model, applying each
/// strategy's correction policy. All failure modes are counted, never
/// raised: detected-uncorrectable blocks pass their data through.
pub fn recover(pm: &ProtectedModel) -> (QuantModel, DecodeCounters) {
    let mut counters = DecodeCounters::default();
    let layers = pm
        .layers
        .iter()
        .map(|layer| match layer {
            ProtectedLayer::Conv2d {
                spec,
                weight,
                bias,
                out_scale,
            } => QuantLayer::Conv2d {
                spec: *spec,
                weight: recover_weights(weight, pm.strategy, &mut counters),
                bias: recover_bias(bias, &mut counters),
                out_scale: *out_scale,
            },
            ProtectedLayer::Linear {
                spec,
                weight,
                bias,
                out_scale,
            } => QuantLayer::Linear {
                spec: *spec,
                weight: recover_weights(weight, pm.strategy, &mut counters),
                bias: recover_bias(bias, &mut counters),
                out_scale: *out_scale,
            },
            ProtectedLayer::Relu => QuantLayer::Relu,
            ProtectedLayer::MaxPool2d(spec) => QuantLayer::MaxPool2d(*spec),
            ProtectedLayer::Flatten => QuantLayer::Flatten,
        })
        .collect();
    (
        QuantModel {
            input: pm.input,
            input_scale: pm.input_scale,
            layers,
        },
        counters,
    )
}

/// Inject faults into the model's in-scope weight memory, treated as one
/// concatenated bit space (payloads in layer order, then redundancy
/// arrays in layer order when in scope). Returns the flipped positions
/// within that space.
pub fn inject_model(pm: &mut ProtectedModel, fault: &FaultModel) -> Vec<u64> {
    let mut memory = Vec::new();
    for t in pm.weight_tensors() {
        memory.extend_from_slice(&t.payload);
    }
    if fault.scope == FaultScope::AllStoredBits {
        for t in pm.weight_tensors() {
            memory.extend_from_slice(&t.redundancy);
        }
    }
    let positions = inject(&mut memory, fault);

    let mut offset = 0usize;
    for layer in pm.layers.iter_mut() {
        if let ProtectedLayer::Conv2d { weight, .. } | ProtectedLayer::Linear { weight, .. } = layer
        {
            let len = weight.payload.len();
            weight
                .payload
                .copy_from_slice(&memory[offset..offset + len]);
            offset += len;
        }
    }
    if fault.scope == FaultScope::AllStoredBits {
        for layer in pm.layers.iter_mut() {
            if let ProtectedLayer::Conv2d { weight, .. } | ProtectedLayer::Linear { weight, .. } =
                layer
            {
                let len = weight.redundancy.len();
                weight
                    .redundancy
                    .copy_from_slice(&memory[offset..offset + len]);
                offset += len;
            }
        }
    }
    debug_assert_eq!(offset, memory.len());
    positions
}

/// One fault-injection trial result.
#[derive(Debug, Clone, PartialEq)]
pub struct FaultTrialReport {
    pub strategy: ProtectionStrategy,
    pub scope: FaultScope,
    pub rate: f64,
    pub trial: u32,
    pub seed: u64,
    pub flips: u64,
    pub counters: DecodeCounters,
    pub clean_accuracy: f64,
    pub accuracy: f64,
    /// `clean - faulty`; negative drops are possible.
    pub drop: f64,
}

/// Mean and sample standard deviation of the drop per (strategy, rate).
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub strategy: ProtectionStrategy,
    pub rate: f64,
    pub mean_drop: f64,
    pub std_drop: f64,
    pub space_overhead_pct: f64,
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub model_name: String,
    pub scope: FaultScope,
    pub trials: Vec<FaultTrialReport>,
    pub aggregate: Vec<AggregateRow>,
}

/// Run the full grid: for each strategy, rate, and trial, build a fresh
/// store, inject, recover, and evaluate. Trial `t` uses seed
/// `base_seed + t` for every strategy and rate, so stores with equal
/// bit-space sizes see identical flip streams.
#[allow(clippy::too_many_arguments)]
pub fn run_experiment(
    qm: &QuantModel,
    test: &Dataset,
    strategies: &[ProtectionStrategy],
    rates: &[f64],
    trials: u32,
    base_seed: u64,
    scope: FaultScope,
    model_name: &str,
) -> Result<ExperimentReport, ConstraintViolation> {
    let test_refs = test.image_refs();
    let clean_accuracy = eval_int8(qm, &test_refs, &test.labels);
    let mut reports = Vec::new();
    for &strategy in strategies {
        let store = apply_strategy_store(qm, strategy)?;
        for &rate in rates {
            for trial in 0..trials {
                let seed = base_seed + trial as u64;
                let mut faulted = store.clone();
                let positions = inject_model(&mut faulted, &FaultModel { rate, seed, scope });
                let (recovered, counters) = recover(&faulted);
                let accuracy = eval_int8(&recovered, &test_refs, &test.labels);
                reports.push(FaultTrialReport {
                    strategy,
                    scope,
                    rate,
                    trial,
                    seed,
                    flips: positions.len() as u64,
                    counters,
                    clean_accuracy,
                    accuracy,
                    drop: clean_accuracy - accuracy,
                });
            }
        }
    }

    let mut aggregate = Vec::new();
    for &strategy in strategies {
        let overhead = apply_strategy_store(qm, strategy)?.space_overhead_pct();
        for &rate in rates {
            let drops: Vec<f64> = reports
                .iter()
                .filter(|r| r.strategy == strategy && r.rate == rate)
                .map(|r| r.drop)
                .collect();
            let (mean, std) = mean_std(&drops);
            aggregate.push(AggregateRow {
                strategy,
                rate,
                mean_drop: mean,
                std_drop: std,
                space_overhead_pct: overhead,
            });
        }
    }
    Ok(ExperimentReport {
        model_name: model_name.to_string(),
        scope,
        trials: reports,
        aggregate,
    })
}

/// Mean and sample standard deviation (n - 1 denominator; 0 for n < 2).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (xs.len() - 1) as f64;
    (mean, var.sqrt())
}

impl ExperimentReport {
    /// Per-trial rows: `model,strategy,scope,fault_rate,trial,seed,flips,
    /// corrected,detected_double,detected_uncorrectable,accuracy,drop`.
    pub fn write_trials_csv<W: std::io::Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(
            out,
            "model,strategy,scope,fault_rate,trial,seed,flips,corrected,detected_double,detected_uncorrectable,accuracy,drop"
        )?;
        for r in &self.trials {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{:.6},{:.6}",
                self.model_name,
                r.strategy,
                r.scope,
                r.rate,
                r.trial,
                r.seed,
                r.flips,
                r.counters.corrected,
                r.counters.detected_double,
                r.counters.detected_uncorrectable,
                r.accuracy,
                r.drop
            )?;
        }
        Ok(())
    }

    /// Aggregate rows: `strategy,rate,mean_drop,std_drop,space_overhead_pct`.
    pub fn write_aggregate_csv<W: std::io::Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "strategy,rate,mean_drop,std_drop,space_overhead_pct")?;
        for row in &self.aggregate {
            writeln!(
                out,
                "{},{},{:.6},{:.6},{}",
                row.strategy, row.rate, row.mean_drop, row.std_drop, row.space_overhead_pct
            )?;
        }
        Ok(())
    }
}
