//! In-place check-bit embedding for 8-byte weight blocks.
//!
//! An int8 weight in `[-64, 63]` carries no information in bit 6: under
//! two's complement it always equals the sign bit. When the first seven
//! weights of an 8-byte block are in that range, their seven bit-6 slots
//! hold the check bits of the (64,57,1) code over the remaining 57 bits,
//! so protection costs zero extra bytes.
//!
//! Physical bit `i` of a block is bit `i % 8` of byte `i / 8` (LSB first).
//! The swizzle routes the seven check slots and 57 data slots, each taken
//! in ascending physical order, to the code's check and data positions in
//! ascending logical order. Decoding reverses the swizzle, runs the
//! standard SEC-DED decode, and then restores bit 6 of bytes 0..=6 from
//! the sign bit.

use crate::quant::QuantizedTensor;
use crate::secded::{DecodeCounters, DecodeOutcome, SecDedCode};
use thiserror::Error;

/// Weights per block: one 64-bit memory word.
pub const BLOCK_WEIGHTS: usize = 8;

/// The bit that duplicates the sign for values in `[-64, 63]`.
const CHECK_BIT: usize = 6;

/// A weight outside `[-64, 63]` at a position that must hold a check bit.
#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
#[error("weight at index {index} is {value}, outside [-64, 63]")]
pub struct ConstraintViolation {
    /// Offending index: byte index 0..=6 for single blocks, flattened
    /// weight index for tensors.
    pub index: usize,
    pub value: i8,
}

/// True iff bit 6 of `w` is redundant with the sign bit.
pub fn has_noninformative_bit(w: i8) -> bool {
    (-64..=63).contains(&w)
}

/// One 64-bit block of eight int8 weights, ordered by flattened index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WeightBlock {
    pub bytes: [i8; BLOCK_WEIGHTS],
}

impl WeightBlock {
    pub fn new(bytes: [i8; BLOCK_WEIGHTS]) -> Self {
        WeightBlock { bytes }
    }

    fn to_bits(self) -> u64 {
        u64::from_le_bytes(self.bytes.map(|b| b as u8))
    }

    fn from_bits(bits: u64) -> Self {
        WeightBlock {
            bytes: bits.to_le_bytes().map(|b| b as i8),
        }
    }
}

/// Decoded block plus the SEC-DED classification of what was found.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockDecodeResult {
    pub block: WeightBlock,
    pub outcome: DecodeOutcome,
}

/// The fixed bijection between physical block bits and logical code
/// positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SwizzleMap {
    /// Bit 6 of bytes 0..=6, ascending: the in-place check slots.
    pub check_phys: [usize; 7],
    /// Every other bit, ascending: bits {0..=5, 7} of bytes 0..=6 and all
    /// eight bits of byte 7.
    pub data_phys: [usize; 57],
}

impl SwizzleMap {
    pub fn new() -> Self {
        let mut check_phys = [0usize; 7];
        for (b, slot) in check_phys.iter_mut().enumerate() {
            *slot = 8 * b + CHECK_BIT;
        }
        let mut data_phys = [0usize; 57];
        let mut i = 0;
        for bit in 0..64 {
            if !(bit % 8 == CHECK_BIT && bit / 8 < 7) {
                data_phys[i] = bit;
                i += 1;
            }
        }
        debug_assert_eq!(i, 57);
        SwizzleMap {
            check_phys,
            data_phys,
        }
    }
}

impl Default for SwizzleMap {
    fn default() -> Self {
        SwizzleMap::new()
    }
}

/// Encoder/decoder pairing the (64,57,1) code with the block swizzle.
#[derive(Debug, Clone)]
pub struct InPlaceCodec {
    code: SecDedCode,
    map: SwizzleMap,
}

impl InPlaceCodec {
    pub fn new() -> Self {
        InPlaceCodec {
            code: SecDedCode::new(57).expect("(64,57,1) is a supported code"),
            map: SwizzleMap::new(),
        }
    }

    pub fn code(&self) -> &SecDedCode {
        &self.code
    }

    pub fn swizzle(&self) -> &SwizzleMap {
        &self.map
    }

    /// Embed the block's check bits into bit 6 of bytes 0..=6. The 57 data
    /// bits are untouched, so output size equals input size.
    pub fn encode_block(&self, b: &WeightBlock) -> Result<WeightBlock, ConstraintViolation> {
        for (i, &w) in b.bytes[..7].iter().enumerate() {
            if !has_noninformative_bit(w) {
                return Err(ConstraintViolation { index: i, value: w });
            }
        }
        let bits = b.to_bits();
        let mut data = 0u128;
        for (i, &phys) in self.map.data_phys.iter().enumerate() {
            if bits >> phys & 1 == 1 {
                data |= 1u128 << i;
            }
        }
        let word = self.code.encode(data).expect("57-bit data fits the code");

        let mut out = bits;
        let checks = &self.code.structure().check_positions;
        for (j, &phys) in self.map.check_phys.iter().enumerate() {
            let set = word >> (checks[j] - 1) & 1 == 1;
            out = (out & !(1u64 << phys)) | ((set as u64) << phys);
        }
        Ok(WeightBlock::from_bits(out))
    }

    /// Unswizzle, SEC-DED decode, reswizzle, and sign-restore. With at most
    /// one flipped bit the result equals the pre-encode block; two flips
    /// are reported via the outcome, with data passed through uncorrected.
    pub fn decode_block(&self, b: &WeightBlock) -> BlockDecodeResult {
        let bits = b.to_bits();
        let structure = self.code.structure();
        let mut word = 0u128;
        for (i, &phys) in self.map.data_phys.iter().enumerate() {
            if bits >> phys & 1 == 1 {
                word |= 1u128 << (structure.data_positions[i] - 1);
            }
        }
        for (j, &phys) in self.map.check_phys.iter().enumerate() {
            if bits >> phys & 1 == 1 {
                word |= 1u128 << (structure.check_positions[j] - 1);
            }
        }
        let (data, outcome) = self.code.decode(word).expect("word built with k bits");

        let mut out = 0u64;
        for (i, &phys) in self.map.data_phys.iter().enumerate() {
            if data >> i & 1 == 1 {
                out |= 1u64 << phys;
            }
        }
        // Sign restore: bit 6 of each small weight is a copy of its sign.
        for byte in 0..7 {
            let sign = out >> (8 * byte + 7) & 1;
            out = (out & !(1u64 << (8 * byte + CHECK_BIT))) | (sign << (8 * byte + CHECK_BIT));
        }
        BlockDecodeResult {
            block: WeightBlock::from_bits(out),
            outcome,
        }
    }

    /// Encode a whole tensor: pad the flattened weights to a multiple of
    /// eight with zeros, then encode each block. Returns the protected
    /// payload and the pad count.
    pub fn protect_tensor(
        &self,
        t: &QuantizedTensor,
    ) -> Result<(Vec<u8>, u8), ConstraintViolation> {
        let (padded, pad) = pad_weights(&t.values);
        let mut payload = Vec::with_capacity(padded.len());
        for (block_idx, chunk) in padded.chunks_exact(BLOCK_WEIGHTS).enumerate() {
            let block = WeightBlock::new(chunk.try_into().unwrap());
            let encoded = self.encode_block(&block).map_err(|e| ConstraintViolation {
                index: block_idx * BLOCK_WEIGHTS + e.index,
                value: e.value,
            })?;
            payload.extend(encoded.bytes.iter().map(|&b| b as u8));
        }
        Ok((payload, pad))
    }

    /// Decode a protected payload back into weights, stripping `pad`
    /// trailing zeros. Detection outcomes are tallied, not raised.
    pub fn unprotect_tensor(&self, payload: &[u8], pad: u8) -> (Vec<i8>, DecodeCounters) {
        assert_eq!(payload.len() % BLOCK_WEIGHTS, 0);
        let mut counters = DecodeCounters::default();
        let mut weights = Vec::with_capacity(payload.len());
        for chunk in payload.chunks_exact(BLOCK_WEIGHTS) {
            let block = WeightBlock::new(std::array::from_fn(|i| chunk[i] as i8));
            let result = self.decode_block(&block);
            counters.record(result.outcome);
            weights.extend_from_slice(&result.block.bytes);
        }
        weights.truncate(weights.len() - pad as usize);
        (weights, counters)
    }
}

impl Default for InPlaceCodec {
    fn default() -> Self {
        InPlaceCodec::new()
    }
}

/// Pad a weight vector to a multiple of eight with zeros; the pad count
/// (0..=7) is recorded in model metadata and stripped on load.
pub fn pad_weights(values: &[i8]) -> (Vec<i8>, u8) {
    let pad = (BLOCK_WEIGHTS - values.len() % BLOCK_WEIGHTS) % BLOCK_WEIGHTS;
    let mut padded = values.to_vec();
    padded.resize(values.len() + pad, 0);
    (padded, pad as u8)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{draw_below, seeded};

    fn random_constrained_block(rng: &mut impl rand::RngCore) -> WeightBlock {
        let mut bytes = [0i8; 8];
        for (i, b) in bytes.iter_mut().enumerate() {
            *b = if i < 7 {
                (draw_below(rng, 128) as i64 - 64) as i8
            } else {
                (draw_below(rng, 256) as i64 - 128) as i8
            };
        }
        WeightBlock::new(bytes)
    }

    #[test]
    fn noninformative_bit_boundaries() {
        assert!(has_noninformative_bit(0));
        assert!(has_noninformative_bit(-64));
        assert!(has_noninformative_bit(63));
        assert!(!has_noninformative_bit(64));
        assert!(!has_noninformative_bit(-65));
        assert!(!has_noninformative_bit(127));
        assert!(!has_noninformative_bit(-128));
    }

    #[test]
    fn swizzle_covers_all_bits() {
        let map = SwizzleMap::new();
        assert_eq!(map.check_phys, [6, 14, 22, 30, 38, 46, 54]);
        let mut all: Vec<usize> = map
            .check_phys
            .iter()
            .chain(map.data_phys.iter())
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..64).collect::<Vec<_>>());
        // Byte 7 contributes all eight of its bits as data.
        for bit in 56..64 {
            assert!(map.data_phys.contains(&bit));
        }
    }

    #[test]
    fn zero_block_encodes_to_zero() {
        let codec = InPlaceCodec::new();
        let zero = WeightBlock::new([0; 8]);
        assert_eq!(codec.encode_block(&zero).unwrap(), zero);
    }

    #[test]
    fn encode_preserves_data_bits_and_eighth_byte() {
        let codec = InPlaceCodec::new();
        let block = WeightBlock::new([1, 2, 3, 4, 5, 6, 7, 100]);
        let encoded = codec.encode_block(&block).unwrap();
        assert_eq!(encoded.bytes[7], 100);
        let before = block.to_bits();
        let after = encoded.to_bits();
        for &phys in codec.swizzle().data_phys.iter() {
            assert_eq!(
                before >> phys & 1,
                after >> phys & 1,
                "data bit {phys} changed"
            );
        }
    }

    #[test]
    fn encode_rejects_large_values_with_index() {
        let codec = InPlaceCodec::new();
        let block = WeightBlock::new([70, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(
            codec.encode_block(&block),
            Err(ConstraintViolation {
                index: 0,
                value: 70
            })
        );
        let block = WeightBlock::new([0, 0, 0, -65, 0, 0, 0, 0]);
        assert_eq!(
            codec.encode_block(&block),
            Err(ConstraintViolation {
                index: 3,
                value: -65
            })
        );
        // The eighth byte is unconstrained.
        let block = WeightBlock::new([0, 0, 0, 0, 0, 0, 0, -128]);
        assert!(codec.encode_block(&block).is_ok());
    }

    #[test]
    fn round_trip_is_identity_with_no_error() {
        let codec = InPlaceCodec::new();
        let mut rng = seeded(21, 0);
        for _ in 0..500 {
            let block = random_constrained_block(&mut rng);
            let encoded = codec.encode_block(&block).unwrap();
            let decoded = codec.decode_block(&encoded);
            assert_eq!(decoded.outcome, DecodeOutcome::NoError);
            assert_eq!(decoded.block, block);
        }
    }

    #[test]
    fn every_single_flip_recovers_exactly() {
        let codec = InPlaceCodec::new();
        let mut rng = seeded(22, 0);
        for _ in 0..50 {
            let block = random_constrained_block(&mut rng);
            let encoded = codec.encode_block(&block).unwrap();
            for bit in 0..64 {
                let mut bytes = encoded.bytes;
                bytes[bit / 8] = (bytes[bit / 8] as u8 ^ (1 << (bit % 8))) as i8;
                let decoded = codec.decode_block(&WeightBlock::new(bytes));
                assert!(
                    matches!(decoded.outcome, DecodeOutcome::CorrectedSingle(_)),
                    "bit {bit} gave {:?}",
                    decoded.outcome
                );
                assert_eq!(decoded.block, block, "bit {bit} payload mismatch");
            }
        }
    }

    #[test]
    fn double_flips_are_detected() {
        let codec = InPlaceCodec::new();
        let mut rng = seeded(23, 0);
        for _ in 0..20 {
            let block = random_constrained_block(&mut rng);
            let encoded = codec.encode_block(&block).unwrap();
            for _ in 0..50 {
                let i = draw_below(&mut rng, 64) as usize;
                let j = draw_below(&mut rng, 64) as usize;
                if i == j {
                    continue;
                }
                let mut bytes = encoded.bytes;
                bytes[i / 8] = (bytes[i / 8] as u8 ^ (1 << (i % 8))) as i8;
                bytes[j / 8] = (bytes[j / 8] as u8 ^ (1 << (j % 8))) as i8;
                let decoded = codec.decode_block(&WeightBlock::new(bytes));
                assert!(!decoded.outcome.is_clean(), "flips {i},{j} looked clean");
            }
        }
    }

    #[test]
    fn sign_restore_is_identity_in_range() {
        for v in -64i8..=63 {
            let byte = v as u8;
            let restored = (byte & !(1 << 6)) | ((byte >> 7 & 1) << 6);
            assert_eq!(restored as i8, v);
        }
    }

    #[test]
    fn protect_tensor_preserves_size_and_pads() {
        let codec = InPlaceCodec::new();
        let t = QuantizedTensor {
            values: vec![1i8; 16],
            shape: vec![16],
            scale: 0.5,
        };
        let (payload, pad) = codec.protect_tensor(&t).unwrap();
        assert_eq!(payload.len(), 16);
        assert_eq!(pad, 0);

        let t = QuantizedTensor {
            values: vec![2i8; 12],
            shape: vec![12],
            scale: 0.5,
        };
        let (payload, pad) = codec.protect_tensor(&t).unwrap();
        assert_eq!(payload.len(), 16);
        assert_eq!(pad, 4);
        let (back, counters) = codec.unprotect_tensor(&payload, pad);
        assert_eq!(back, t.values);
        assert_eq!(counters, DecodeCounters::default());
    }

    #[test]
    fn protect_tensor_reports_flat_index() {
        let codec = InPlaceCodec::new();
        let mut values = vec![0i8; 16];
        values[5] = 70;
        let t = QuantizedTensor {
            values,
            shape: vec![16],
            scale: 1.0,
        };
        assert_eq!(
            codec.protect_tensor(&t),
            Err(ConstraintViolation {
                index: 5,
                value: 70
            })
        );
        // A large value at an eighth position is fine.
        let mut values = vec![0i8; 16];
        values[15] = 100;
        let t = QuantizedTensor {
            values,
            shape: vec![16],
            scale: 1.0,
        };
        assert!(codec.protect_tensor(&t).is_ok());
    }
}
