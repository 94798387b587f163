//! SEC-DED linear block codes: the extended Hamming (64,57,1) code and the
//! shortened extended Hamming (72,64,1) code.
//!
//! Construction is fixed so that encodings are portable:
//!
//! * Logical bit positions are 1-indexed, `1..=k`.
//! * Hamming check bits sit at the power-of-two positions `1, 2, 4, ...`;
//!   the column of every position `p < k` in the Hamming rows is the binary
//!   representation of `p`, so the Hamming syndrome of a single flip *is*
//!   its position.
//! * The last logical position `k` holds an overall parity bit that makes
//!   every codeword even-weight; its Hamming column is zero.
//! * Data bits fill the remaining positions in ascending order.
//! * The (72,64,1) code is the (127,120) parent shortened to its first 71
//!   positions plus the overall parity bit; syndromes pointing at a dropped
//!   position (72..=127) decode as [`DecodeOutcome::DetectedUncorrectable`].
//!
//! Words are carried in `u128` values: bit `p - 1` of the word is logical
//! position `p`, and bit `i` of a data word is the `i`-th data bit (placed
//! at `data_positions[i]`).

use thiserror::Error;

/// Errors from code construction and use.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum CodeError {
    #[error("unsupported data length {0} (supported: 57, 64)")]
    UnsupportedDataBits(usize),
    #[error("word length mismatch: value needs more than {expected} bits")]
    LengthMismatch { expected: usize },
}

/// Code parameters: length `k`, data bits `d`, correctable bits `t`,
/// check bits `r = k - d`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CodeSpec {
    pub k: usize,
    pub d: usize,
    pub t: usize,
    pub r: usize,
}

/// The concrete parity-check matrix realization.
///
/// `columns[p - 1]` is the r-bit column of logical position `p`; bit `j`
/// is row `j`, and row `r - 1` is the all-ones overall-parity row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParityStructure {
    pub columns: Vec<u8>,
    pub check_positions: Vec<usize>,
    pub data_positions: Vec<usize>,
}

/// Classification of a received word.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeOutcome {
    /// Zero syndrome, even parity: word accepted as-is.
    NoError,
    /// Exactly one bit corrected, at the given logical position `1..=k`.
    CorrectedSingle(usize),
    /// Even parity with nonzero syndrome: an even number of flips.
    DetectedDouble,
    /// Odd parity with a syndrome pointing outside the code.
    DetectedUncorrectable,
}

impl DecodeOutcome {
    /// True when the payload can be trusted (clean or repaired).
    pub fn is_clean(&self) -> bool {
        matches!(
            self,
            DecodeOutcome::NoError | DecodeOutcome::CorrectedSingle(_)
        )
    }
}

/// Running tallies of decode outcomes across many words.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DecodeCounters {
    pub corrected: u64,
    pub detected_double: u64,
    pub detected_uncorrectable: u64,
}

impl DecodeCounters {
    pub fn record(&mut self, outcome: DecodeOutcome) {
        match outcome {
            DecodeOutcome::NoError => {}
            DecodeOutcome::CorrectedSingle(_) => self.corrected += 1,
            DecodeOutcome::DetectedDouble => self.detected_double += 1,
            DecodeOutcome::DetectedUncorrectable => self.detected_uncorrectable += 1,
        }
    }

    pub fn merge(&mut self, other: DecodeCounters) {
        self.corrected += other.corrected;
        self.detected_double += other.detected_double;
        self.detected_uncorrectable += other.detected_uncorrectable;
    }
}

/// A SEC-DED code with its parameters, matrix, and precomputed row masks.
#[derive(Debug, Clone)]
pub struct SecDedCode {
    spec: CodeSpec,
    structure: ParityStructure,
    /// `row_masks[j]`: u128 with bit `p - 1` set iff row `j` covers
    /// position `p`. Row `r - 1` covers everything.
    row_masks: Vec<u128>,
}

impl SecDedCode {
    /// Build the code for the given data length. Deterministic: identical
    /// inputs yield bit-identical matrices.
    pub fn new(data_bits: usize) -> Result<Self, CodeError> {
        let (k, hamming_rows) = match data_bits {
            57 => (64, 6),
            64 => (72, 7),
            _ => return Err(CodeError::UnsupportedDataBits(data_bits)),
        };
        let r = hamming_rows + 1;
        let spec = CodeSpec {
            k,
            d: data_bits,
            t: 1,
            r,
        };

        let mut columns = vec![0u8; k];
        let parity_row_bit = 1u8 << (r - 1);
        for p in 1..k {
            columns[p - 1] = p as u8 | parity_row_bit;
        }
        // Overall parity position: zero Hamming column, parity row only.
        columns[k - 1] = parity_row_bit;

        let mut check_positions: Vec<usize> = (0..hamming_rows).map(|j| 1usize << j).collect();
        check_positions.push(k);
        let data_positions: Vec<usize> = (1..=k).filter(|p| !check_positions.contains(p)).collect();
        debug_assert_eq!(data_positions.len(), data_bits);

        let mut row_masks = vec![0u128; r];
        for (p, &col) in columns.iter().enumerate() {
            for (j, mask) in row_masks.iter_mut().enumerate() {
                if col >> j & 1 == 1 {
                    *mask |= 1u128 << p;
                }
            }
        }

        Ok(SecDedCode {
            spec,
            structure: ParityStructure {
                columns,
                check_positions,
                data_positions,
            },
            row_masks,
        })
    }

    pub fn spec(&self) -> &CodeSpec {
        &self.spec
    }

    pub fn structure(&self) -> &ParityStructure {
        &self.structure
    }

    /// Encode `d` data bits into a `k`-bit codeword. Data bits appear
    /// unchanged at the data positions; the result has even weight.
    pub fn encode(&self, data: u128) -> Result<u128, CodeError> {
        if self.spec.d < 128 && data >> self.spec.d != 0 {
            return Err(CodeError::LengthMismatch {
                expected: self.spec.d,
            });
        }
        let mut word = self.place_data(data);
        // Check columns are unit vectors, so each Hamming check bit is just
        // the parity of its row over the data bits.
        for j in 0..self.spec.r - 1 {
            if (word & self.row_masks[j]).count_ones() & 1 == 1 {
                word |= 1u128 << ((1usize << j) - 1);
            }
        }
        if word.count_ones() & 1 == 1 {
            word |= 1u128 << (self.spec.k - 1);
        }
        Ok(word)
    }

    /// Decode a `k`-bit word: extract the data bits and classify the error
    /// pattern. Corrections are applied before extraction; detected
    /// multi-bit patterns pass the data through uncorrected.
    pub fn decode(&self, word: u128) -> Result<(u128, DecodeOutcome), CodeError> {
        if word >> self.spec.k != 0 {
            return Err(CodeError::LengthMismatch {
                expected: self.spec.k,
            });
        }
        let syndrome = self.syndrome(word);
        let hamming = (syndrome & !(1 << (self.spec.r - 1))) as usize;
        let parity_odd = syndrome >> (self.spec.r - 1) & 1 == 1;

        let outcome = match (hamming, parity_odd) {
            (0, false) => DecodeOutcome::NoError,
            (0, true) => DecodeOutcome::CorrectedSingle(self.spec.k),
            (pos, true) if pos < self.spec.k => DecodeOutcome::CorrectedSingle(pos),
            (_, true) => DecodeOutcome::DetectedUncorrectable,
            (_, false) => DecodeOutcome::DetectedDouble,
        };
        let corrected = match outcome {
            DecodeOutcome::CorrectedSingle(pos) => word ^ (1u128 << (pos - 1)),
            _ => word,
        };
        Ok((self.extract_data(corrected), outcome))
    }

    /// Parity-check product H·w as an r-bit value (row j in bit j).
    pub fn syndrome(&self, word: u128) -> u8 {
        let mut syn = 0u8;
        for (j, mask) in self.row_masks.iter().enumerate() {
            if (word & mask).count_ones() & 1 == 1 {
                syn |= 1 << j;
            }
        }
        syn
    }

    fn place_data(&self, data: u128) -> u128 {
        let mut word = 0u128;
        for (i, &p) in self.structure.data_positions.iter().enumerate() {
            if data >> i & 1 == 1 {
                word |= 1u128 << (p - 1);
            }
        }
        word
    }

    fn extract_data(&self, word: u128) -> u128 {
        let mut data = 0u128;
        for (i, &p) in self.structure.data_positions.iter().enumerate() {
            if word >> (p - 1) & 1 == 1 {
                data |= 1u128 << i;
            }
        }
        data
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{draw_below, seeded};
    use rand::RngCore;

    fn random_data(rng: &mut impl RngCore, bits: usize) -> u128 {
        let raw = (rng.next_u64() as u128) << 64 | rng.next_u64() as u128;
        raw & ((1u128 << bits) - 1)
    }

    #[test]
    fn build_57_yields_64_57_1() {
        let code = SecDedCode::new(57).unwrap();
        assert_eq!(
            *code.spec(),
            CodeSpec {
                k: 64,
                d: 57,
                t: 1,
                r: 7
            }
        );
        assert_eq!(
            code.structure().check_positions,
            vec![1, 2, 4, 8, 16, 32, 64]
        );
        assert_eq!(code.structure().data_positions.len(), 57);
    }

    #[test]
    fn build_64_yields_72_64_1() {
        let code = SecDedCode::new(64).unwrap();
        assert_eq!(
            *code.spec(),
            CodeSpec {
                k: 72,
                d: 64,
                t: 1,
                r: 8
            }
        );
        assert_eq!(
            code.structure().check_positions,
            vec![1, 2, 4, 8, 16, 32, 64, 72]
        );
    }

    #[test]
    fn build_rejects_unsupported_sizes() {
        assert_eq!(
            SecDedCode::new(10).unwrap_err(),
            CodeError::UnsupportedDataBits(10)
        );
        assert_eq!(
            SecDedCode::new(0).unwrap_err(),
            CodeError::UnsupportedDataBits(0)
        );
    }

    #[test]
    fn structure_invariants_hold() {
        for d in [57usize, 64] {
            let code = SecDedCode::new(d).unwrap();
            let s = code.structure();
            let k = code.spec().k;
            let r = code.spec().r;
            let mut all: Vec<usize> = s
                .check_positions
                .iter()
                .chain(&s.data_positions)
                .copied()
                .collect();
            all.sort_unstable();
            assert_eq!(all, (1..=k).collect::<Vec<_>>());
            // Hamming parts distinct; unit vectors exactly at check positions.
            let ham = |p: usize| s.columns[p - 1] & !(1 << (r - 1));
            for p in 1..=k {
                assert_ne!(s.columns[p - 1], 0);
                for q in p + 1..=k {
                    if ham(p) != 0 || ham(q) != 0 {
                        assert_ne!(ham(p), ham(q), "positions {p} and {q}");
                    }
                }
            }
            for j in 0..r - 1 {
                assert_eq!(ham(1 << j), 1 << j);
            }
        }
    }

    #[test]
    fn zero_encodes_to_zero() {
        let code = SecDedCode::new(57).unwrap();
        assert_eq!(code.encode(0).unwrap(), 0);
    }

    #[test]
    fn encode_rejects_oversized_data() {
        let code = SecDedCode::new(57).unwrap();
        assert!(matches!(
            code.encode(1u128 << 57),
            Err(CodeError::LengthMismatch { .. })
        ));
        let code = SecDedCode::new(64).unwrap();
        assert!(matches!(
            code.decode(1u128 << 72),
            Err(CodeError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn single_one_codeword_checks_match_its_column() {
        // With one data bit set at position p, the Hamming check bits must
        // spell out p and the overall weight must be even.
        let code = SecDedCode::new(57).unwrap();
        let word = code.encode(1).unwrap();
        let p = code.structure().data_positions[0];
        for j in 0..6 {
            let check_set = word >> ((1usize << j) - 1) & 1 == 1;
            assert_eq!(check_set, p >> j & 1 == 1);
        }
        assert_eq!(word.count_ones() % 2, 0);
    }

    #[test]
    fn codewords_have_zero_syndrome_and_even_weight() {
        for d in [57usize, 64] {
            let code = SecDedCode::new(d).unwrap();
            let mut rng = seeded(1, 0);
            for _ in 0..200 {
                let data = random_data(&mut rng, d);
                let word = code.encode(data).unwrap();
                assert_eq!(code.syndrome(word), 0);
                assert_eq!(word.count_ones() % 2, 0);
                let (back, outcome) = code.decode(word).unwrap();
                assert_eq!(back, data);
                assert_eq!(outcome, DecodeOutcome::NoError);
            }
        }
    }

    #[test]
    fn linearity() {
        for d in [57usize, 64] {
            let code = SecDedCode::new(d).unwrap();
            let mut rng = seeded(2, 0);
            for _ in 0..200 {
                let a = random_data(&mut rng, d);
                let b = random_data(&mut rng, d);
                assert_eq!(
                    code.encode(a ^ b).unwrap(),
                    code.encode(a).unwrap() ^ code.encode(b).unwrap()
                );
            }
        }
    }

    #[test]
    fn all_single_flips_corrected() {
        for d in [57usize, 64] {
            let code = SecDedCode::new(d).unwrap();
            let k = code.spec().k;
            let mut rng = seeded(3, 0);
            for _ in 0..20 {
                let data = random_data(&mut rng, d);
                let word = code.encode(data).unwrap();
                for pos in 1..=k {
                    let (back, outcome) = code.decode(word ^ (1u128 << (pos - 1))).unwrap();
                    assert_eq!(outcome, DecodeOutcome::CorrectedSingle(pos));
                    assert_eq!(back, data);
                }
            }
        }
    }

    #[test]
    fn all_double_flips_detected_never_clean() {
        for d in [57usize, 64] {
            let code = SecDedCode::new(d).unwrap();
            let k = code.spec().k;
            let mut rng = seeded(4, 0);
            for _ in 0..5 {
                let data = random_data(&mut rng, d);
                let word = code.encode(data).unwrap();
                for i in 1..=k {
                    for j in i + 1..=k {
                        let received = word ^ (1u128 << (i - 1)) ^ (1u128 << (j - 1));
                        let (_, outcome) = code.decode(received).unwrap();
                        assert!(
                            matches!(
                                outcome,
                                DecodeOutcome::DetectedDouble
                                    | DecodeOutcome::DetectedUncorrectable
                            ),
                            "flips at {i},{j} gave {outcome:?}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn shortened_code_flags_out_of_range_syndromes() {
        // Three flips whose columns XOR to a dropped position of the
        // (127,120) parent must decode as uncorrectable.
        let code = SecDedCode::new(64).unwrap();
        let data = 0xDEAD_BEEF_0123_4567u128 & ((1 << 64) - 1);
        let word = code.encode(data).unwrap();
        let (i, j, l) = (8usize, 16usize, 66usize);
        assert!(i ^ j ^ l >= 72 && l <= 71);
        let received = word ^ (1u128 << (i - 1)) ^ (1u128 << (j - 1)) ^ (1u128 << (l - 1));
        let (_, outcome) = code.decode(received).unwrap();
        assert_eq!(outcome, DecodeOutcome::DetectedUncorrectable);
    }

    #[test]
    fn construction_is_deterministic() {
        let a = SecDedCode::new(57).unwrap();
        let b = SecDedCode::new(57).unwrap();
        assert_eq!(a.structure(), b.structure());
        assert_eq!(a.row_masks, b.row_masks);
    }

    #[test]
    fn random_flip_count_classification() {
        // Sanity over random numbers of flips: 0 -> NoError, 1 -> corrected
        // with exact data, 2 -> detected.
        let code = SecDedCode::new(64).unwrap();
        let k = code.spec().k as u64;
        let mut rng = seeded(5, 0);
        for _ in 0..500 {
            let data = random_data(&mut rng, 64);
            let word = code.encode(data).unwrap();
            let flips = draw_below(&mut rng, 3);
            let mut received = word;
            let mut positions = Vec::new();
            while positions.len() < flips as usize {
                let p = draw_below(&mut rng, k) + 1;
                if !positions.contains(&p) {
                    positions.push(p);
                    received ^= 1u128 << (p - 1);
                }
            }
            let (back, outcome) = code.decode(received).unwrap();
            match flips {
                0 => {
                    assert_eq!(outcome, DecodeOutcome::NoError);
                    assert_eq!(back, data);
                }
                1 => {
                    assert_eq!(
                        outcome,
                        DecodeOutcome::CorrectedSingle(positions[0] as usize)
                    );
                    assert_eq!(back, data);
                }
                _ => assert!(!outcome.is_clean() || back == data),
            }
        }
    }
}
