//! The `ZSEC` binary model container.
//!
//! Layout (all multi-byte integers little-endian):
//!
//! ```text
//! magic "ZSEC" | version u16 | strategy u8 | record count u16
//! records... | crc32 u32      (CRC-32/ISO-HDLC over all preceding bytes)
//! record := kind u8 | dims 4 x u32 | scale f64 | pad u8
//!           | payload_len u64 | payload | redundancy_len u64 | redundancy
//! ```
//!
//! Strategy tags: 0 faulty, 1 zero, 2 ecc, 3 in-place, 4 float (unquantized
//! f64 parameters). Record kinds: 0 Conv2d, 1 Linear, 2 ReLU, 3 MaxPool2d,
//! 4 Flatten, 5 Bias32, 6 Quant (an activation quantization point carrying
//! its scale), 7 Input (model input shape). Records appear in execution
//! order: Input, then for protected models a Quant record with the input
//! scale, then layers with each Conv/Linear followed by its Bias32 record
//! and a Quant record with its output scale.
//!
//! Format v1 fixes convolutions at stride 1, padding 1 and writes pool
//! kernel/stride into the MaxPool record dims. Weights and redundancy
//! store exactly the in-memory protected layout, so fault injection on a
//! saved model targets the same bits the file holds.

use crate::fault::{
    ProtectedBias, ProtectedLayer, ProtectedModel, ProtectedTensor, ProtectionStrategy,
};
use crate::nn::{ConvSpec, FloatLayer, FloatModel, LinearSpec, PoolSpec};
use std::io::Write;
use std::path::Path;
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"ZSEC";
pub const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic: not a ZSEC model file")]
    BadMagic,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error("unknown strategy tag {0}")]
    BadStrategyTag(u8),
    #[error("unknown record kind {0}")]
    BadRecordKind(u8),
    #[error("crc mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    CrcMismatch { stored: u32, computed: u32 },
    #[error("file truncated at byte {0}")]
    Truncated(usize),
    #[error("malformed model file: {0}")]
    Malformed(String),
    #[error("format v1 cannot store this model: {0}")]
    Unsupported(String),
}

/// CRC-32/ISO-HDLC (reflected, polynomial 0xEDB88320, init and final xor
/// 0xFFFFFFFF) — the common zlib/PNG checksum.
pub fn crc32(bytes: &[u8]) -> u32 {
    const TABLE: [u32; 256] = crc32_table();
    let mut crc = 0xFFFF_FFFFu32;
    for &b in bytes {
        crc = (crc >> 8) ^ TABLE[((crc ^ b as u32) & 0xFF) as usize];
    }
    crc ^ 0xFFFF_FFFF
}

const fn crc32_table() -> [u32; 256] {
    let mut table = [0u32; 256];
    let mut i = 0;
    while i < 256 {
        let mut crc = i as u32;
        let mut bit = 0;
        while bit < 8 {
            crc = if crc & 1 == 1 {
                (crc >> 1) ^ 0xEDB8_8320
            } else {
                crc >> 1
            };
            bit += 1;
        }
        table[i] = crc;
        i += 1;
    }
    table
}

/// Either stage of the pipeline: a float model from pre-training, or a
/// protected (possibly just quantized, strategy `faulty`) memory image.
#[derive(Debug, Clone, PartialEq)]
pub enum StoredModel {
    Float(FloatModel),
    Protected(ProtectedModel),
}

const KIND_CONV: u8 = 0;
const KIND_LINEAR: u8 = 1;
const KIND_RELU: u8 = 2;
const KIND_MAXPOOL: u8 = 3;
const KIND_FLATTEN: u8 = 4;
const KIND_BIAS: u8 = 5;
const KIND_QUANT: u8 = 6;
const KIND_INPUT: u8 = 7;

const TAG_FLOAT: u8 = 4;

fn strategy_tag(s: ProtectionStrategy) -> u8 {
    match s {
        ProtectionStrategy::Faulty => 0,
        ProtectionStrategy::ParityZero => 1,
        ProtectionStrategy::StandardEcc => 2,
        ProtectionStrategy::InPlace => 3,
    }
}

fn tag_strategy(tag: u8) -> Result<ProtectionStrategy, StoreError> {
    Ok(match tag {
        0 => ProtectionStrategy::Faulty,
        1 => ProtectionStrategy::ParityZero,
        2 => ProtectionStrategy::StandardEcc,
        3 => ProtectionStrategy::InPlace,
        t => return Err(StoreError::BadStrategyTag(t)),
    })
}

struct Record {
    kind: u8,
    dims: [u32; 4],
    scale: f64,
    pad: u8,
    payload: Vec<u8>,
    redundancy: Vec<u8>,
}

impl Record {
    fn plain(kind: u8, dims: [u32; 4]) -> Record {
        Record {
            kind,
            dims,
            scale: 0.0,
            pad: 0,
            payload: Vec::new(),
            redundancy: Vec::new(),
        }
    }

    fn write(&self, out: &mut Vec<u8>) {
        out.push(self.kind);
        for d in self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.extend_from_slice(&self.scale.to_le_bytes());
        out.push(self.pad);
        out.extend_from_slice(&(self.payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.payload);
        out.extend_from_slice(&(self.redundancy.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.redundancy);
    }
}

fn f64s_to_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn bytes_to_f64s(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

fn float_records(model: &FloatModel) -> Result<Vec<Record>, StoreError> {
    let mut records = vec![Record::plain(
        KIND_INPUT,
        [
            model.input.0 as u32,
            model.input.1 as u32,
            model.input.2 as u32,
            0,
        ],
    )];
    for layer in &model.layers {
        match layer {
            FloatLayer::Conv2d { spec, weight, bias } => {
                check_conv_spec(spec)?;
                records.push(Record {
                    kind: KIND_CONV,
                    dims: [
                        spec.out_ch as u32,
                        spec.in_ch as u32,
                        spec.kh as u32,
                        spec.kw as u32,
                    ],
                    scale: 1.0,
                    pad: 0,
                    payload: f64s_to_bytes(weight),
                    redundancy: Vec::new(),
                });
                records.push(Record {
                    kind: KIND_BIAS,
                    dims: [bias.len() as u32, 0, 0, 0],
                    scale: 1.0,
                    pad: 0,
                    payload: f64s_to_bytes(bias),
                    redundancy: Vec::new(),
                });
            }
            FloatLayer::Linear { spec, weight, bias } => {
                records.push(Record {
                    kind: KIND_LINEAR,
                    dims: [spec.out_f as u32, spec.in_f as u32, 1, 1],
                    scale: 1.0,
                    pad: 0,
                    payload: f64s_to_bytes(weight),
                    redundancy: Vec::new(),
                });
                records.push(Record {
                    kind: KIND_BIAS,
                    dims: [bias.len() as u32, 0, 0, 0],
                    scale: 1.0,
                    pad: 0,
                    payload: f64s_to_bytes(bias),
                    redundancy: Vec::new(),
                });
            }
            FloatLayer::Relu => records.push(Record::plain(KIND_RELU, [0; 4])),
            FloatLayer::MaxPool2d(spec) => records.push(Record::plain(
                KIND_MAXPOOL,
                [spec.kernel as u32, spec.stride as u32, 0, 0],
            )),
            FloatLayer::Flatten => records.push(Record::plain(KIND_FLATTEN, [0; 4])),
        }
    }
    Ok(records)
}

fn check_conv_spec(spec: &ConvSpec) -> Result<(), StoreError> {
    if spec.stride != 1 || spec.padding != 1 {
        return Err(StoreError::Unsupported(format!(
            "conv stride {} padding {} (format v1 stores stride-1, padding-1 convolutions)",
            spec.stride, spec.padding
        )));
    }
    Ok(())
}

fn weight_record(kind: u8, dims: [u32; 4], t: &ProtectedTensor) -> Record {
    Record {
        kind,
        dims,
        scale: t.scale,
        pad: t.pad,
        payload: t.payload.clone(),
        redundancy: t.redundancy.clone(),
    }
}

fn bias_record(b: &ProtectedBias) -> Record {
    let len = (b.payload.len() - b.pad as usize) / 4;
    Record {
        kind: KIND_BIAS,
        dims: [len as u32, 0, 0, 0],
        scale: b.scale,
        pad: b.pad,
        payload: b.payload.clone(),
        redundancy: b.redundancy.clone(),
    }
}

fn quant_record(scale: f64) -> Record {
    Record {
        kind: KIND_QUANT,
        dims: [0; 4],
        scale,
        pad: 0,
        payload: Vec::new(),
        redundancy: Vec::new(),
    }
}

fn protected_records(model: &ProtectedModel) -> Result<Vec<Record>, StoreError> {
    let mut records = vec![
        Record::plain(
            KIND_INPUT,
            [
                model.input.0 as u32,
                model.input.1 as u32,
                model.input.2 as u32,
                0,
            ],
        ),
        quant_record(model.input_scale),
    ];
    for layer in &model.layers {
        match layer {
            ProtectedLayer::Conv2d {
                spec,
                weight,
                bias,
                out_scale,
            } => {
                check_conv_spec(spec)?;
                records.push(weight_record(
                    KIND_CONV,
                    [
                        spec.out_ch as u32,
                        spec.in_ch as u32,
                        spec.kh as u32,
                        spec.kw as u32,
                    ],
                    weight,
                ));
                records.push(bias_record(bias));
                records.push(quant_record(*out_scale));
            }
            ProtectedLayer::Linear {
                spec,
                weight,
                bias,
                out_scale,
            } => {
                records.push(weight_record(
                    KIND_LINEAR,
                    [spec.out_f as u32, spec.in_f as u32, 1, 1],
                    weight,
                ));
                records.push(bias_record(bias));
                records.push(quant_record(*out_scale));
            }
            ProtectedLayer::Relu => records.push(Record::plain(KIND_RELU, [0; 4])),
            ProtectedLayer::MaxPool2d(spec) => records.push(Record::plain(
                KIND_MAXPOOL,
                [spec.kernel as u32, spec.stride as u32, 0, 0],
            )),
            ProtectedLayer::Flatten => records.push(Record::plain(KIND_FLATTEN, [0; 4])),
        }
    }
    Ok(records)
}

/// Serialize a model to the container bytes, CRC included.
pub fn to_bytes(model: &StoredModel) -> Result<Vec<u8>, StoreError> {
    let (tag, records) = match model {
        StoredModel::Float(fm) => (TAG_FLOAT, float_records(fm)?),
        StoredModel::Protected(pm) => (strategy_tag(pm.strategy), protected_records(pm)?),
    };
    let mut bytes = Vec::new();
    bytes.extend_from_slice(&MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.push(tag);
    bytes.extend_from_slice(&(records.len() as u16).to_le_bytes());
    for r in &records {
        r.write(&mut bytes);
    }
    let crc = crc32(&bytes);
    bytes.extend_from_slice(&crc.to_le_bytes());
    Ok(bytes)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], StoreError> {
        let end = self
            .pos
            .checked_add(n)
            .ok_or(StoreError::Truncated(self.pos))?;
        if end > self.bytes.len() {
            return Err(StoreError::Truncated(self.pos));
        }
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8, StoreError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, StoreError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, StoreError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, StoreError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, StoreError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn read_record(cur: &mut Cursor) -> Result<Record, StoreError> {
    let kind = cur.u8()?;
    if kind > KIND_INPUT {
        return Err(StoreError::BadRecordKind(kind));
    }
    let dims = [cur.u32()?, cur.u32()?, cur.u32()?, cur.u32()?];
    let scale = cur.f64()?;
    let pad = cur.u8()?;
    let payload_len = cur.u64()? as usize;
    let payload = cur.take(payload_len)?.to_vec();
    let redundancy_len = cur.u64()? as usize;
    let redundancy = cur.take(redundancy_len)?.to_vec();
    Ok(Record {
        kind,
        dims,
        scale,
        pad,
        payload,
        redundancy,
    })
}

/// Parse container bytes back into a model. The CRC is verified first;
/// any structural problem is a hard error, never a misparse.
pub fn from_bytes(bytes: &[u8]) -> Result<StoredModel, StoreError> {
    if bytes.len() < MAGIC.len() + 2 + 1 + 2 + 4 {
        return Err(StoreError::Truncated(bytes.len()));
    }
    if bytes[..4] != MAGIC {
        return Err(StoreError::BadMagic);
    }
    let body = &bytes[..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let computed = crc32(body);
    if stored != computed {
        return Err(StoreError::CrcMismatch { stored, computed });
    }

    let mut cur = Cursor {
        bytes: body,
        pos: 4,
    };
    let version = cur.u16()?;
    if version != VERSION {
        return Err(StoreError::UnsupportedVersion(version));
    }
    let tag = cur.u8()?;
    let count = cur.u16()? as usize;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        records.push(read_record(&mut cur)?);
    }
    if cur.pos != body.len() {
        return Err(StoreError::Malformed(format!(
            "{} trailing bytes after the last record",
            body.len() - cur.pos
        )));
    }

    if tag == TAG_FLOAT {
        parse_float(&records).map(StoredModel::Float)
    } else {
        let strategy = tag_strategy(tag)?;
        parse_protected(&records, strategy).map(StoredModel::Protected)
    }
}

/// Weight count implied by a Conv/Linear record's dims, overflow-checked
/// (dims come straight from the file).
fn weight_count(r: &Record) -> Result<usize, StoreError> {
    let dims: [u64; 4] = r.dims.map(u64::from);
    let count = if r.kind == KIND_CONV {
        dims.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d))
    } else {
        dims[0].checked_mul(dims[1])
    };
    count
        .and_then(|c| usize::try_from(c).ok())
        .filter(|&c| c <= (1 << 32))
        .ok_or_else(|| StoreError::Malformed("weight dims overflow".into()))
}

fn parse_input(records: &[Record]) -> Result<(usize, usize, usize), StoreError> {
    let first = records
        .first()
        .ok_or_else(|| StoreError::Malformed("empty record list".into()))?;
    if first.kind != KIND_INPUT {
        return Err(StoreError::Malformed(
            "first record must be the input shape".into(),
        ));
    }
    Ok((
        first.dims[0] as usize,
        first.dims[1] as usize,
        first.dims[2] as usize,
    ))
}

fn parse_float(records: &[Record]) -> Result<FloatModel, StoreError> {
    let input = parse_input(records)?;
    let mut layers = Vec::new();
    let mut iter = records[1..].iter().peekable();
    while let Some(r) = iter.next() {
        match r.kind {
            KIND_CONV | KIND_LINEAR => {
                let expected = weight_count(r)?;
                if r.payload.len() != expected * 8 {
                    return Err(StoreError::Malformed(format!(
                        "float weight payload {} bytes, dims imply {}",
                        r.payload.len(),
                        expected * 8
                    )));
                }
                let weight = bytes_to_f64s(&r.payload);
                let b = iter.next().filter(|b| b.kind == KIND_BIAS).ok_or_else(|| {
                    StoreError::Malformed("weights must be followed by a bias record".into())
                })?;
                if b.payload.len() != b.dims[0] as usize * 8 {
                    return Err(StoreError::Malformed("float bias payload length".into()));
                }
                let bias = bytes_to_f64s(&b.payload);
                layers.push(if r.kind == KIND_CONV {
                    FloatLayer::Conv2d {
                        spec: ConvSpec {
                            out_ch: r.dims[0] as usize,
                            in_ch: r.dims[1] as usize,
                            kh: r.dims[2] as usize,
                            kw: r.dims[3] as usize,
                            stride: 1,
                            padding: 1,
                        },
                        weight,
                        bias,
                    }
                } else {
                    FloatLayer::Linear {
                        spec: LinearSpec {
                            out_f: r.dims[0] as usize,
                            in_f: r.dims[1] as usize,
                        },
                        weight,
                        bias,
                    }
                });
            }
            KIND_RELU => layers.push(FloatLayer::Relu),
            KIND_MAXPOOL => layers.push(FloatLayer::MaxPool2d(PoolSpec {
                kernel: r.dims[0] as usize,
                stride: r.dims[1] as usize,
            })),
            KIND_FLATTEN => layers.push(FloatLayer::Flatten),
            k => {
                return Err(StoreError::Malformed(format!(
                    "record kind {k} unexpected in a float model"
                )))
            }
        }
    }
    Ok(FloatModel { input, layers })
}

fn check_weight_lengths(
    r: &Record,
    count: usize,
    strategy: ProtectionStrategy,
) -> Result<(), StoreError> {
    let padded = count + r.pad as usize;
    if r.pad >= 8 || !padded.is_multiple_of(8) || r.payload.len() != padded {
        return Err(StoreError::Malformed(format!(
            "weight payload {} bytes with pad {} inconsistent with {} weights",
            r.payload.len(),
            r.pad,
            count
        )));
    }
    let expected_red = match strategy {
        ProtectionStrategy::Faulty | ProtectionStrategy::InPlace => 0,
        ProtectionStrategy::ParityZero | ProtectionStrategy::StandardEcc => padded / 8,
    };
    if r.redundancy.len() != expected_red {
        return Err(StoreError::Malformed(format!(
            "weight redundancy {} bytes, strategy {} implies {}",
            r.redundancy.len(),
            strategy,
            expected_red
        )));
    }
    Ok(())
}

fn parse_protected(
    records: &[Record],
    strategy: ProtectionStrategy,
) -> Result<ProtectedModel, StoreError> {
    let input = parse_input(records)?;
    let mut iter = records[1..].iter().peekable();
    let input_scale = match iter.next() {
        Some(r) if r.kind == KIND_QUANT => r.scale,
        _ => {
            return Err(StoreError::Malformed(
                "protected models start with an input quant record".into(),
            ))
        }
    };
    if !(input_scale.is_finite() && input_scale > 0.0) {
        return Err(StoreError::Malformed("input scale must be positive".into()));
    }
    let mut layers = Vec::new();
    while let Some(r) = iter.next() {
        match r.kind {
            KIND_CONV | KIND_LINEAR => {
                let count = weight_count(r)?;
                check_weight_lengths(r, count, strategy)?;
                let shape: Vec<usize> = if r.kind == KIND_CONV {
                    r.dims.iter().map(|&d| d as usize).collect()
                } else {
                    vec![r.dims[0] as usize, r.dims[1] as usize, 1, 1]
                };
                let weight = ProtectedTensor {
                    payload: r.payload.clone(),
                    redundancy: r.redundancy.clone(),
                    pad: r.pad,
                    shape,
                    scale: r.scale,
                };
                let b = iter.next().filter(|b| b.kind == KIND_BIAS).ok_or_else(|| {
                    StoreError::Malformed("weights must be followed by a bias record".into())
                })?;
                let bias_bytes = b.dims[0] as usize * 4 + b.pad as usize;
                if b.pad >= 8 || !bias_bytes.is_multiple_of(8) || b.payload.len() != bias_bytes {
                    return Err(StoreError::Malformed("bias payload length".into()));
                }
                if !b.redundancy.is_empty() && b.redundancy.len() != bias_bytes / 8 {
                    return Err(StoreError::Malformed("bias redundancy length".into()));
                }
                let bias = ProtectedBias {
                    payload: b.payload.clone(),
                    redundancy: b.redundancy.clone(),
                    pad: b.pad,
                    scale: b.scale,
                };
                let q = iter
                    .next()
                    .filter(|q| q.kind == KIND_QUANT)
                    .ok_or_else(|| {
                        StoreError::Malformed("parameter layers end with a quant record".into())
                    })?;
                let out_scale = q.scale;
                layers.push(if r.kind == KIND_CONV {
                    ProtectedLayer::Conv2d {
                        spec: ConvSpec {
                            out_ch: r.dims[0] as usize,
                            in_ch: r.dims[1] as usize,
                            kh: r.dims[2] as usize,
                            kw: r.dims[3] as usize,
                            stride: 1,
                            padding: 1,
                        },
                        weight,
                        bias,
                        out_scale,
                    }
                } else {
                    ProtectedLayer::Linear {
                        spec: LinearSpec {
                            out_f: r.dims[0] as usize,
                            in_f: r.dims[1] as usize,
                        },
                        weight,
                        bias,
                        out_scale,
                    }
                });
            }
            KIND_RELU => layers.push(ProtectedLayer::Relu),
            KIND_MAXPOOL => layers.push(ProtectedLayer::MaxPool2d(PoolSpec {
                kernel: r.dims[0] as usize,
                stride: r.dims[1] as usize,
            })),
            KIND_FLATTEN => layers.push(ProtectedLayer::Flatten),
            k => {
                return Err(StoreError::Malformed(format!(
                    "record kind {k} unexpected in a protected model"
                )))
            }
        }
    }
    Ok(ProtectedModel {
        strategy,
        input,
        input_scale,
        layers,
    })
}

/// Save atomically: write to a sibling temp file, then rename over the
/// target.
pub fn save_model(path: &Path, model: &StoredModel) -> Result<(), StoreError> {
    let bytes = to_bytes(model)?;
    let io_err = |source| StoreError::Io {
        path: path.display().to_string(),
        source,
    };
    let tmp = path.with_extension("zsec.tmp");
    let mut file = std::fs::File::create(&tmp).map_err(io_err)?;
    file.write_all(&bytes).map_err(io_err)?;
    file.sync_all().map_err(io_err)?;
    drop(file);
    std::fs::rename(&tmp, path).map_err(io_err)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<StoredModel, StoreError> {
    let bytes = std::fs::read(path).map_err(|source| StoreError::Io {
        path: path.display().to_string(),
        source,
    })?;
    from_bytes(&bytes)
}
