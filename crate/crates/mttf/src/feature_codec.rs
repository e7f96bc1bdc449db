//! Feature bit-stream: uniform scalar quantization of vector residuals,
//! closed-loop temporal prediction, and a context-adaptive binary arithmetic
//! coder.
//!
//! ## Bit-exact payload definition
//!
//! Each frame contributes `2 * channels` integer symbols: the quantized
//! residuals of the weight entries followed by the bias entries, predicted
//! from the previous reconstructed vector (the key-frame vector for the first
//! inter frame). Each symbol is binarized as
//!
//! 1. a zero flag (1 = symbol is zero),
//! 2. if nonzero, a sign bin (1 = negative),
//! 3. the order-0 exp-Golomb code of `|symbol| - 1`, sent as `n`
//!    continuation bins of 1, one stop bin of 0, then `n` fixed suffix bins
//!    (most significant first) of `|symbol| + 1 - 2^n` with
//!    `n = floor(log2(|symbol| + 1))`.
//!
//! Every bin is coded by a binary arithmetic coder (32-bit low/high registers
//! with carry-pending renormalization, most-significant-bit-first byte
//! packing) under one of eight adaptive contexts indexed by bin role (zero /
//! sign / prefix / suffix) and coefficient group (weight / bias). Context
//! probabilities are Laplace-smoothed counts, halved when their total reaches
//! 2^15. The terminator is the standard two-bit flush followed by zero
//! padding to a byte boundary. Identical rules on both sides make any two
//! conforming implementations interoperate bit-exactly.

use crate::error::{Error, Result};
use crate::factorizer::CompactMotionVector;
use ndarray::Array1;

/// Quantization and context-model configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct CodecConfig {
    /// Quantization step for vector residuals.
    pub step: f64,
    /// Vector channel count; one frame codes `2 * channels` symbols.
    pub channels: usize,
}

impl CodecConfig {
    pub const CONTEXT_COUNT: usize = 8;

    pub fn new(step: f64, channels: usize) -> Result<Self> {
        if !(step > 0.0) {
            return Err(Error::config(format!("quantization step must be > 0, got {step}")));
        }
        Ok(CodecConfig { step, channels })
    }

    pub fn symbols_per_frame(&self) -> usize {
        2 * self.channels
    }
}

/// Integer residual symbols of one frame: weight residuals then bias
/// residuals.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantizedResidual {
    pub symbols: Vec<i64>,
}

/// Quantizes the residual between a vector and its reference.
/// The companion [`reconstruct`] gives `ref + step * symbols`, so the
/// per-element reconstruction error is at most `step / 2`.
pub fn predict_and_quantize(
    current: &CompactMotionVector,
    reference: &CompactMotionVector,
    step: f64,
) -> Result<QuantizedResidual> {
    if !(step > 0.0) {
        return Err(Error::config(format!("quantization step must be > 0, got {step}")));
    }
    if current.channels() != reference.channels() {
        return Err(Error::input("vector/reference channel mismatch"));
    }
    let symbols = current
        .to_flat()
        .iter()
        .zip(reference.to_flat().iter())
        .map(|(v, r)| ((v - r) / step).round() as i64)
        .collect();
    Ok(QuantizedResidual { symbols })
}

/// Rebuilds the decoder-side vector from a reference and coded symbols.
pub fn reconstruct(
    reference: &CompactMotionVector,
    residual: &QuantizedResidual,
    step: f64,
) -> Result<CompactMotionVector> {
    let flat = reference.to_flat();
    if residual.symbols.len() != flat.len() {
        return Err(Error::input("residual length mismatch"));
    }
    let rec: Vec<f64> = flat
        .iter()
        .zip(residual.symbols.iter())
        .map(|(r, &s)| r + step * s as f64)
        .collect();
    let n = rec.len() / 2;
    CompactMotionVector::new(
        Array1::from_vec(rec[..n].to_vec()),
        Array1::from_vec(rec[n..].to_vec()),
    )
}

// ---- adaptive binary model --------------------------------------------------

const RESCALE_LIMIT: u32 = 1 << 15;

/// Laplace-smoothed bit counts; decoder-replicable adaptation.
#[derive(Debug, Clone, PartialEq, Eq)]
struct BinModel {
    zeros: u32,
    ones: u32,
}

impl BinModel {
    fn new() -> Self {
        BinModel { zeros: 1, ones: 1 }
    }

    fn total(&self) -> u32 {
        self.zeros + self.ones
    }

    fn update(&mut self, bit: bool) {
        if bit {
            self.ones += 1;
        } else {
            self.zeros += 1;
        }
        if self.total() >= RESCALE_LIMIT {
            self.zeros = (self.zeros + 1) >> 1;
            self.ones = (self.ones + 1) >> 1;
        }
    }
}

/// Bin roles for context selection.
#[derive(Debug, Clone, Copy)]
enum Role {
    Zero = 0,
    Sign = 1,
    Prefix = 2,
    Suffix = 3,
}

/// Shared adaptive state of encoder and decoder; evolves identically on both
/// sides for identical symbol streams.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoderState {
    contexts: Vec<BinModel>,
}

impl CoderState {
    pub fn new() -> Self {
        CoderState {
            contexts: (0..CodecConfig::CONTEXT_COUNT).map(|_| BinModel::new()).collect(),
        }
    }

    fn index(role: Role, is_bias: bool) -> usize {
        (role as usize) * 2 + is_bias as usize
    }
}

impl Default for CoderState {
    fn default() -> Self {
        Self::new()
    }
}

// ---- bit I/O ------------------------------------------------------------------

struct BitWriter {
    bytes: Vec<u8>,
    current: u8,
    filled: u8,
}

impl BitWriter {
    fn new() -> Self {
        BitWriter {
            bytes: Vec::new(),
            current: 0,
            filled: 0,
        }
    }

    fn push(&mut self, bit: bool) {
        self.current = (self.current << 1) | bit as u8;
        self.filled += 1;
        if self.filled == 8 {
            self.bytes.push(self.current);
            self.current = 0;
            self.filled = 0;
        }
    }

    fn finish(mut self) -> Vec<u8> {
        while self.filled != 0 {
            self.push(false);
        }
        self.bytes
    }
}

struct BitReader<'a> {
    data: &'a [u8],
    pos: usize,
    /// Bits consumed past the end of `data` (zero-filled).
    overrun: usize,
}

/// Reads past the payload tolerate the decoder's register lookahead; anything
/// beyond this is a truncated stream.
const MAX_OVERRUN_BITS: usize = 64;

impl<'a> BitReader<'a> {
    fn new(data: &'a [u8]) -> Self {
        BitReader {
            data,
            pos: 0,
            overrun: 0,
        }
    }

    fn next(&mut self) -> Result<bool> {
        if self.pos < self.data.len() * 8 {
            let bit = (self.data[self.pos / 8] >> (7 - self.pos % 8)) & 1;
            self.pos += 1;
            Ok(bit != 0)
        } else {
            self.overrun += 1;
            if self.overrun > MAX_OVERRUN_BITS {
                return Err(Error::Decode(
                    "feature payload truncated: arithmetic decoder ran out of bits".into(),
                ));
            }
            Ok(false)
        }
    }
}

// ---- arithmetic coder -----------------------------------------------------------

const CODE_BITS: u32 = 32;
const TOP: u64 = (1 << CODE_BITS) - 1;
const HALF: u64 = 1 << (CODE_BITS - 1);
const QUARTER: u64 = 1 << (CODE_BITS - 2);
const THREE_QUARTER: u64 = HALF + QUARTER;

struct ArithEncoder {
    low: u64,
    high: u64,
    pending: u64,
    out: BitWriter,
}

impl ArithEncoder {
    fn new() -> Self {
        ArithEncoder {
            low: 0,
            high: TOP,
            pending: 0,
            out: BitWriter::new(),
        }
    }

    fn emit(&mut self, bit: bool) {
        self.out.push(bit);
        while self.pending > 0 {
            self.out.push(!bit);
            self.pending -= 1;
        }
    }

    fn encode(&mut self, model: &mut BinModel, bit: bool) {
        let range = self.high - self.low + 1;
        let split = self.low + range * model.zeros as u64 / model.total() as u64 - 1;
        if bit {
            self.low = split + 1;
        } else {
            self.high = split;
        }
        loop {
            if self.high < HALF {
                self.emit(false);
            } else if self.low >= HALF {
                self.emit(true);
                self.low -= HALF;
                self.high -= HALF;
            } else if self.low >= QUARTER && self.high < THREE_QUARTER {
                self.pending += 1;
                self.low -= QUARTER;
                self.high -= QUARTER;
            } else {
                break;
            }
            self.low <<= 1;
            self.high = (self.high << 1) | 1;
        }
        model.update(bit);
    }

    /// Two-bit terminator plus pending bits; output is byte-aligned.
    fn finish(mut self) -> Vec<u8> {
        self.pending += 1;
        if self.low < QUARTER {
            self.emit(false);
        } else {
            self.emit(true);
        }
        self.out.finish()
    }
}

struct ArithDecoder<'a> {
    low: u64,
    high: u64,
    code: u64,
    input: BitReader<'a>,
}

impl<'a> ArithDecoder<'a> {
    fn new(data: &'a [u8]) -> Result<Self> {
        let mut input = BitReader::new(data);
        let mut code = 0u64;
        for _ in 0..CODE_BITS {
            code = (code << 1) | input.next()? as u64;
        }
        Ok(ArithDecoder {
            low: 0,
            high: TOP,
            code,
            input,
        })
    }

    fn decode(&mut self, model: &mut BinModel) -> Result<bool> {
        let range = self.high - self.low + 1;
        let split = self.low + range * model.zeros as u64 / model.total() as u64 - 1;
        let bit = self.code > split;
        if bit {
            self.low = split + 1;
        } else {
            self.high = split;
        }
        loop {
            if self.high < HALF {
                // nothing
            } else if self.low >= HALF {
                self.low -= HALF;
                self.high -= HALF;
                self.code -= HALF;
            } else if self.low >= QUARTER && self.high < THREE_QUARTER {
                self.low -= QUARTER;
                self.high -= QUARTER;
                self.code -= QUARTER;
            } else {
                break;
            }
            self.low <<= 1;
            self.high = (self.high << 1) | 1;
            self.code = (self.code << 1) | self.input.next()? as u64;
        }
        model.update(bit);
        Ok(bit)
    }
}

// ---- symbol layer -----------------------------------------------------------------

fn encode_symbol(enc: &mut ArithEncoder, state: &mut CoderState, symbol: i64, is_bias: bool) {
    let ctx = |r: Role| CoderState::index(r, is_bias);
    let zero = symbol == 0;
    let idx = ctx(Role::Zero);
    enc.encode(&mut state.contexts[idx], zero);
    if zero {
        return;
    }
    let idx = ctx(Role::Sign);
    enc.encode(&mut state.contexts[idx], symbol < 0);
    // Order-0 exp-Golomb of |symbol| - 1.
    let value = symbol.unsigned_abs() - 1;
    let n = 64 - (value + 1).leading_zeros() - 1;
    let pidx = ctx(Role::Prefix);
    for _ in 0..n {
        enc.encode(&mut state.contexts[pidx], true);
    }
    enc.encode(&mut state.contexts[pidx], false);
    let suffix = value + 1 - (1u64 << n);
    let sidx = ctx(Role::Suffix);
    for k in (0..n).rev() {
        enc.encode(&mut state.contexts[sidx], (suffix >> k) & 1 == 1);
    }
}

fn decode_symbol(dec: &mut ArithDecoder<'_>, state: &mut CoderState, is_bias: bool) -> Result<i64> {
    let ctx = |r: Role| CoderState::index(r, is_bias);
    let idx = ctx(Role::Zero);
    if dec.decode(&mut state.contexts[idx])? {
        return Ok(0);
    }
    let idx = ctx(Role::Sign);
    let negative = dec.decode(&mut state.contexts[idx])?;
    let pidx = ctx(Role::Prefix);
    let mut n = 0u32;
    while dec.decode(&mut state.contexts[pidx])? {
        n += 1;
        if n > 62 {
            return Err(Error::Decode("exp-Golomb prefix too long".into()));
        }
    }
    let sidx = ctx(Role::Suffix);
    let mut suffix = 0u64;
    for _ in 0..n {
        suffix = (suffix << 1) | dec.decode(&mut state.contexts[sidx])? as u64;
    }
    let value = (1u64 << n) + suffix - 1;
    let magnitude = (value + 1) as i64;
    Ok(if negative { -magnitude } else { magnitude })
}

/// Entropy-codes per-frame residuals into a byte-aligned payload.
pub fn entropy_encode(
    residuals: &[QuantizedResidual],
    cfg: &CodecConfig,
    state: &mut CoderState,
) -> Vec<u8> {
    let mut enc = ArithEncoder::new();
    for frame in residuals {
        debug_assert_eq!(frame.symbols.len(), cfg.symbols_per_frame());
        for (i, &s) in frame.symbols.iter().enumerate() {
            encode_symbol(&mut enc, state, s, i >= cfg.channels);
        }
    }
    enc.finish()
}

/// Exact inverse of [`entropy_encode`] given the same config and a state
/// starting from the same point. Trailing bytes after the terminator are
/// ignored; a payload too short to decode `frame_count` frames is a decode
/// error.
pub fn entropy_decode(
    payload: &[u8],
    frame_count: usize,
    cfg: &CodecConfig,
    state: &mut CoderState,
) -> Result<Vec<QuantizedResidual>> {
    let mut dec = ArithDecoder::new(payload)?;
    let mut frames = Vec::with_capacity(frame_count);
    for _ in 0..frame_count {
        let mut symbols = Vec::with_capacity(cfg.symbols_per_frame());
        for i in 0..cfg.symbols_per_frame() {
            symbols.push(decode_symbol(&mut dec, state, i >= cfg.channels)?);
        }
        frames.push(QuantizedResidual { symbols });
    }
    Ok(frames)
}

/// Side products of coding one vector sequence.
#[derive(Debug, Clone)]
pub struct CodedSequence {
    pub payload: Vec<u8>,
    /// The reconstructions the decoder will produce, one per inter frame;
    /// the encoder renders from these to stay drift-free.
    pub reconstructions: Vec<CompactMotionVector>,
    /// Symbol count per frame (constant, kept for rate reporting).
    pub symbols_per_frame: usize,
}

/// Closed-loop predictive coding of a vector sequence. `key_vector` seeds the
/// prediction chain; it is derived from the reconstructed key frame on both
/// sides and therefore costs no bits.
pub fn code_sequence(
    vectors: &[CompactMotionVector],
    key_vector: &CompactMotionVector,
    cfg: &CodecConfig,
) -> Result<CodedSequence> {
    if vectors.is_empty() {
        return Ok(CodedSequence {
            payload: Vec::new(),
            reconstructions: Vec::new(),
            symbols_per_frame: cfg.symbols_per_frame(),
        });
    }
    let mut residuals = Vec::with_capacity(vectors.len());
    let mut reconstructions = Vec::with_capacity(vectors.len());
    let mut reference = key_vector.clone();
    for v in vectors {
        let residual = predict_and_quantize(v, &reference, cfg.step)?;
        let recon = reconstruct(&reference, &residual, cfg.step)?;
        residuals.push(residual);
        reference = recon.clone();
        reconstructions.push(recon);
    }
    let mut state = CoderState::new();
    let payload = entropy_encode(&residuals, cfg, &mut state);
    Ok(CodedSequence {
        payload,
        reconstructions,
        symbols_per_frame: cfg.symbols_per_frame(),
    })
}

/// Decoder mirror of [`code_sequence`].
pub fn decode_sequence(
    payload: &[u8],
    frame_count: usize,
    key_vector: &CompactMotionVector,
    cfg: &CodecConfig,
) -> Result<Vec<CompactMotionVector>> {
    if frame_count == 0 {
        return Ok(Vec::new());
    }
    let mut state = CoderState::new();
    let residuals = entropy_decode(payload, frame_count, cfg, &mut state)?;
    let mut reference = key_vector.clone();
    let mut out = Vec::with_capacity(frame_count);
    for residual in &residuals {
        let recon = reconstruct(&reference, residual, cfg.step)?;
        reference = recon.clone();
        out.push(recon);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array1;
    use rand::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vector(values: &[f64]) -> CompactMotionVector {
        let n = values.len() / 2;
        CompactMotionVector::new(
            Array1::from_vec(values[..n].to_vec()),
            Array1::from_vec(values[n..].to_vec()),
        )
        .unwrap()
    }

    #[test]
    fn quantizer_hand_rounding_oracle() {
        let reference = vector(&[0.0, 0.0]);
        let current = vector(&[0.03, -0.07]);
        let r = predict_and_quantize(&current, &reference, 0.02).unwrap();
        assert_eq!(r.symbols, vec![2, -4]);
        let rec = reconstruct(&reference, &r, 0.02).unwrap();
        for (a, b) in rec.to_flat().iter().zip(current.to_flat().iter()) {
            assert!((a - b).abs() <= 0.01 + 1e-12);
        }
    }

    #[test]
    fn zero_residual_for_equal_vectors() {
        let v = vector(&[0.5, -0.25, 0.125, 0.0]);
        let r = predict_and_quantize(&v, &v, 0.02).unwrap();
        assert!(r.symbols.iter().all(|&s| s == 0));
    }

    #[test]
    fn reconstruction_error_shrinks_with_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let values: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v = vector(&values);
        let reference = vector(&vec![0.0; 8]);
        let mut last = f64::INFINITY;
        for step in [1.0 / 10.0, 1.0 / 50.0, 1.0 / 200.0] {
            let r = predict_and_quantize(&v, &reference, step).unwrap();
            let rec = reconstruct(&reference, &r, step).unwrap();
            let err = rec
                .to_flat()
                .iter()
                .zip(v.to_flat().iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(err <= step / 2.0 + 1e-12);
            assert!(err <= last);
            last = err;
        }
    }

    #[test]
    fn invalid_step_is_config_error() {
        let v = vector(&[0.1, 0.2]);
        assert!(matches!(predict_and_quantize(&v, &v, 0.0), Err(Error::Config(_))));
        assert!(matches!(predict_and_quantize(&v, &v, -1.0), Err(Error::Config(_))));
        assert!(CodecConfig::new(f64::NAN, 1).is_err());
    }

    #[test]
    fn forty_zero_symbols_stay_tiny() {
        let cfg = CodecConfig::new(1.0 / 50.0, 20).unwrap();
        let frame = QuantizedResidual {
            symbols: vec![0; 40],
        };
        let mut state = CoderState::new();
        let payload = entropy_encode(&[frame.clone()], &cfg, &mut state);
        assert!(
            payload.len() <= 8,
            "adaptation should drive 40 zero flags below 8 bytes, got {}",
            payload.len()
        );
        let mut state = CoderState::new();
        let decoded = entropy_decode(&payload, 1, &cfg, &mut state).unwrap();
        assert_eq!(decoded, vec![frame]);
    }

    #[test]
    fn empty_sequence_decodes_to_nothing() {
        let cfg = CodecConfig::new(0.02, 4).unwrap();
        let mut state = CoderState::new();
        let payload = entropy_encode(&[], &cfg, &mut state);
        let mut state = CoderState::new();
        let frames = entropy_decode(&payload, 0, &cfg, &mut state).unwrap();
        assert!(frames.is_empty());
        // code_sequence contract for empty input: empty payload.
        let key = vector(&[0.0; 8]);
        let coded = code_sequence(&[], &key, &cfg).unwrap();
        assert!(coded.payload.is_empty());
    }

    #[test]
    fn random_roundtrip_with_heavy_tails() {
        let cfg = CodecConfig::new(0.02, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let frames: Vec<QuantizedResidual> = (0..1000)
            .map(|_| QuantizedResidual {
                symbols: (0..10)
                    .map(|_| {
                        // Mixture: mostly small, occasionally huge.
                        if rng.gen_bool(0.05) {
                            rng.gen_range(-1_000_000i64..=1_000_000)
                        } else {
                            rng.gen_range(-8i64..=8)
                        }
                    })
                    .collect(),
            })
            .collect();
        let mut state = CoderState::new();
        let payload = entropy_encode(&frames, &cfg, &mut state);
        let mut state = CoderState::new();
        let decoded = entropy_decode(&payload, frames.len(), &cfg, &mut state).unwrap();
        assert_eq!(decoded, frames);
    }

    #[test]
    fn truncated_payload_is_decode_error() {
        let cfg = CodecConfig::new(0.02, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let frames: Vec<QuantizedResidual> = (0..200)
            .map(|_| QuantizedResidual {
                symbols: (0..16).map(|_| rng.gen_range(-50i64..=50)).collect(),
            })
            .collect();
        let mut state = CoderState::new();
        let payload = entropy_encode(&frames, &cfg, &mut state);
        let mut state = CoderState::new();
        let err = entropy_decode(&payload[..payload.len() / 2], frames.len(), &cfg, &mut state);
        assert!(matches!(err, Err(Error::Decode(_))));
    }

    #[test]
    fn trailing_garbage_is_ignored() {
        let cfg = CodecConfig::new(0.02, 2).unwrap();
        let frames = vec![QuantizedResidual {
            symbols: vec![3, -1, 0, 7],
        }];
        let mut state = CoderState::new();
        let mut payload = entropy_encode(&frames, &cfg, &mut state);
        payload.extend_from_slice(&[0xAB, 0xCD, 0xEF]);
        let mut state = CoderState::new();
        let decoded = entropy_decode(&payload, 1, &cfg, &mut state).unwrap();
        assert_eq!(decoded, frames);
    }

    #[test]
    fn closed_loop_has_no_drift() {
        let cfg = CodecConfig::new(1.0 / 50.0, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let key = vector(&(0..8).map(|_| rng.gen_range(-0.5..0.5)).collect::<Vec<_>>());
        // Random walk so residuals stay small but nonzero.
        let mut walk = key.to_flat();
        let vectors: Vec<CompactMotionVector> = (0..300)
            .map(|_| {
                for v in walk.iter_mut() {
                    *v += rng.gen_range(-0.05..0.05);
                }
                vector(&walk)
            })
            .collect();
        let coded = code_sequence(&vectors, &key, &cfg).unwrap();
        let decoded = decode_sequence(&coded.payload, vectors.len(), &key, &cfg).unwrap();
        assert_eq!(decoded.len(), vectors.len());
        for (enc_side, dec_side) in coded.reconstructions.iter().zip(decoded.iter()) {
            for (a, b) in enc_side.to_flat().iter().zip(dec_side.to_flat().iter()) {
                assert_eq!(a.to_bits(), b.to_bits(), "encoder and decoder reconstructions must be bit-identical");
            }
        }
        for (orig, rec) in vectors.iter().zip(decoded.iter()) {
            for (a, b) in orig.to_flat().iter().zip(rec.to_flat().iter()) {
                assert!((a - b).abs() <= cfg.step / 2.0 + 1e-12, "no drift at any frame");
            }
        }
    }

    #[test]
    fn static_sequence_compresses_to_near_nothing() {
        let cfg = CodecConfig::new(1.0 / 50.0, 20).unwrap();
        let key = vector(&vec![0.25; 40]);
        let vectors = vec![key.clone(); 60];
        let coded = code_sequence(&vectors, &key, &cfg).unwrap();
        assert!(coded.payload.len() <= 24, "static clip payload: {}", coded.payload.len());
        for rec in &coded.reconstructions {
            assert_eq!(rec, &key);
        }
    }

    #[test]
    fn rate_decreases_with_predictability() {
        let cfg = CodecConfig::new(0.02, 10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut sizes = Vec::new();
        for p_zero in [0.5f64, 0.8, 0.95, 0.995] {
            let frames: Vec<QuantizedResidual> = (0..500)
                .map(|_| QuantizedResidual {
                    symbols: (0..20)
                        .map(|_| {
                            if rng.gen_bool(p_zero) {
                                0
                            } else {
                                *[-1i64, 1].choose(&mut rng).unwrap()
                            }
                        })
                        .collect(),
                })
                .collect();
            let mut state = CoderState::new();
            sizes.push(entropy_encode(&frames, &cfg, &mut state).len());
        }
        for w in sizes.windows(2) {
            assert!(w[1] <= w[0], "rate must not increase with predictability: {sizes:?}");
        }
        // An i.i.d.-zero stream costs well under a bit per symbol.
        let zero_frames: Vec<QuantizedResidual> = (0..500)
            .map(|_| QuantizedResidual { symbols: vec![0; 20] })
            .collect();
        let mut state = CoderState::new();
        let bytes = entropy_encode(&zero_frames, &cfg, &mut state).len();
        assert!((bytes * 8) as f64 / 10_000.0 < 1.0);
    }
}
