//! `.mttf` container: a fixed binary header followed by the key-frame
//! payload and the feature payload, plus the pluggable key-frame codec
//! adapter.
//!
//! Header layout (big-endian, 34 bytes):
//!
//! ```text
//! magic "MTTF" | version u8 | r u16 | resolution_index u8 | channels u8
//! | depth u8 | resolution_count u8 | frame_count u16 | fps_num u16
//! | fps_den u16 | step_num u16 | step_den u16 | keyframe_codec_id u8
//! | keyframe_len u32 | feature_len u32 | crc32 u32 (over all prior bytes)
//! ```

use crate::error::{Error, FormatError, Result};
use crate::video::{FrameImage, Fps};
use std::io::Write as _;
use std::path::PathBuf;
use std::process::Command;
use std::sync::atomic::{AtomicU64, Ordering};

pub const MAGIC: &[u8; 4] = b"MTTF";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 34;

/// CRC-32 (IEEE 802.3, reflected polynomial 0xEDB88320).
pub fn crc32(data: &[u8]) -> u32 {
    let mut crc = 0xFFFF_FFFFu32;
    for &byte in data {
        crc ^= byte as u32;
        for _ in 0..8 {
            let mask = (crc & 1).wrapping_neg();
            crc = (crc >> 1) ^ (0xEDB8_8320 & mask);
        }
    }
    !crc
}

/// Sequence metadata carried in every stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamHeader {
    pub version: u8,
    pub largest_resolution: u16,
    pub resolution_index: u8,
    pub channels: u8,
    pub depth: u8,
    pub resolution_count: u8,
    pub frame_count: u16,
    pub fps: Fps,
    pub step_num: u16,
    pub step_den: u16,
    pub keyframe_codec_id: u8,
    pub keyframe_len: u32,
    pub feature_len: u32,
}

impl StreamHeader {
    /// Quantization step as the exact rational stored in the stream.
    pub fn step(&self) -> f64 {
        self.step_num as f64 / self.step_den as f64
    }

    pub fn resolution(&self) -> usize {
        (self.largest_resolution >> self.resolution_index) as usize
    }

    fn validate(&self) -> Result<()> {
        if self.resolution_index >= self.resolution_count {
            return Err(FormatError::InvalidField(format!(
                "resolution index {} out of range ({} supported)",
                self.resolution_index, self.resolution_count
            ))
            .into());
        }
        if self.step_num == 0 || self.step_den == 0 {
            return Err(FormatError::InvalidField("zero quantization step".into()).into());
        }
        if self.fps.num == 0 || self.fps.den == 0 {
            return Err(FormatError::InvalidField("zero frame rate".into()).into());
        }
        if self.frame_count == 0 {
            return Err(FormatError::InvalidField("empty sequence".into()).into());
        }
        Ok(())
    }

    fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN);
        out.extend_from_slice(MAGIC);
        out.push(self.version);
        out.extend_from_slice(&self.largest_resolution.to_be_bytes());
        out.push(self.resolution_index);
        out.push(self.channels);
        out.push(self.depth);
        out.push(self.resolution_count);
        out.extend_from_slice(&self.frame_count.to_be_bytes());
        out.extend_from_slice(&self.fps.num.to_be_bytes());
        out.extend_from_slice(&self.fps.den.to_be_bytes());
        out.extend_from_slice(&self.step_num.to_be_bytes());
        out.extend_from_slice(&self.step_den.to_be_bytes());
        out.push(self.keyframe_codec_id);
        out.extend_from_slice(&self.keyframe_len.to_be_bytes());
        out.extend_from_slice(&self.feature_len.to_be_bytes());
        let crc = crc32(&out);
        out.extend_from_slice(&crc.to_be_bytes());
        debug_assert_eq!(out.len(), HEADER_LEN);
        out
    }

    fn parse(data: &[u8]) -> Result<Self> {
        if data.len() < HEADER_LEN {
            return Err(FormatError::Truncated {
                needed: HEADER_LEN,
                available: data.len(),
            }
            .into());
        }
        if &data[..4] != MAGIC {
            return Err(FormatError::BadMagic.into());
        }
        let version = data[4];
        if version != VERSION {
            return Err(FormatError::UnsupportedVersion(version).into());
        }
        let stored = u32::from_be_bytes(data[30..34].try_into().unwrap());
        let computed = crc32(&data[..30]);
        if stored != computed {
            return Err(FormatError::CrcMismatch { stored, computed }.into());
        }
        let header = StreamHeader {
            version,
            largest_resolution: u16::from_be_bytes(data[5..7].try_into().unwrap()),
            resolution_index: data[7],
            channels: data[8],
            depth: data[9],
            resolution_count: data[10],
            frame_count: u16::from_be_bytes(data[11..13].try_into().unwrap()),
            fps: Fps::new(
                u16::from_be_bytes(data[13..15].try_into().unwrap()),
                u16::from_be_bytes(data[15..17].try_into().unwrap()),
            ),
            step_num: u16::from_be_bytes(data[17..19].try_into().unwrap()),
            step_den: u16::from_be_bytes(data[19..21].try_into().unwrap()),
            keyframe_codec_id: data[21],
            keyframe_len: u32::from_be_bytes(data[22..26].try_into().unwrap()),
            feature_len: u32::from_be_bytes(data[26..30].try_into().unwrap()),
        };
        header.validate()?;
        Ok(header)
    }
}

/// Concatenates header and payloads after checking declared lengths.
pub fn mux(header: &StreamHeader, keyframe_payload: &[u8], feature_payload: &[u8]) -> Result<Vec<u8>> {
    header.validate()?;
    if header.keyframe_len as usize != keyframe_payload.len() {
        return Err(FormatError::LengthMismatch {
            declared: header.keyframe_len as usize,
            actual: keyframe_payload.len(),
        }
        .into());
    }
    if header.feature_len as usize != feature_payload.len() {
        return Err(FormatError::LengthMismatch {
            declared: header.feature_len as usize,
            actual: feature_payload.len(),
        }
        .into());
    }
    let mut out = header.to_bytes();
    out.extend_from_slice(keyframe_payload);
    out.extend_from_slice(feature_payload);
    Ok(out)
}

/// Exact inverse of [`mux`]; crc and lengths are verified before anything is
/// returned.
pub fn demux(stream: &[u8]) -> Result<(StreamHeader, Vec<u8>, Vec<u8>)> {
    let header = StreamHeader::parse(stream)?;
    let need = HEADER_LEN + header.keyframe_len as usize + header.feature_len as usize;
    if stream.len() < need {
        return Err(FormatError::Truncated {
            needed: need,
            available: stream.len(),
        }
        .into());
    }
    let key_start = HEADER_LEN;
    let key_end = key_start + header.keyframe_len as usize;
    let feat_end = key_end + header.feature_len as usize;
    Ok((
        header,
        stream[key_start..key_end].to_vec(),
        stream[key_end..feat_end].to_vec(),
    ))
}

/// Pluggable key-frame codec. `decode(encode(frame, qp))` must return a frame
/// of identical dimensions; the pipeline only ever consumes that
/// reconstruction, never the original pixels.
pub trait KeyframeCodec: Send + Sync {
    fn id(&self) -> u8;
    fn encode(&self, frame: &FrameImage, qp: u8) -> Result<Vec<u8>>;
    fn decode(&self, payload: &[u8]) -> Result<FrameImage>;
}

/// Encodes the key frame and immediately decodes the payload. Both pipeline
/// ends consume the returned reconstruction, keeping encoder and decoder on
/// identical pixels.
pub fn encode_keyframe(
    frame: &FrameImage,
    qp: u8,
    codec: &dyn KeyframeCodec,
) -> Result<(Vec<u8>, FrameImage)> {
    let payload = codec.encode(frame, qp)?;
    let reconstruction = codec.decode(&payload)?;
    if reconstruction.resolution() != frame.resolution() {
        return Err(Error::Adapter(format!(
            "codec changed frame size: {} -> {}",
            frame.resolution(),
            reconstruction.resolution()
        )));
    }
    Ok((payload, reconstruction))
}

/// Builtin lossless adapter (id 0): 8-bit planar RGB with a 2-byte size
/// prefix. Lossless for any 8-bit source; also the frame interchange format
/// handed to external codec commands.
#[derive(Debug, Clone, Default)]
pub struct LosslessCodec;

pub const LOSSLESS_CODEC_ID: u8 = 0;
pub const EXTERNAL_CODEC_ID: u8 = 1;

impl KeyframeCodec for LosslessCodec {
    fn id(&self) -> u8 {
        LOSSLESS_CODEC_ID
    }

    fn encode(&self, frame: &FrameImage, _qp: u8) -> Result<Vec<u8>> {
        Ok(serialize_frame(frame))
    }

    fn decode(&self, payload: &[u8]) -> Result<FrameImage> {
        deserialize_frame(payload)
    }
}

/// Self-describing single-frame format: u16 BE size, then planar RGB8.
pub fn serialize_frame(frame: &FrameImage) -> Vec<u8> {
    let size = frame.resolution() as u16;
    let mut out = Vec::with_capacity(2 + 3 * frame.resolution() * frame.resolution());
    out.extend_from_slice(&size.to_be_bytes());
    out.extend_from_slice(&frame.to_rgb8());
    out
}

pub fn deserialize_frame(data: &[u8]) -> Result<FrameImage> {
    if data.len() < 2 {
        return Err(Error::Adapter("frame payload shorter than its size prefix".into()));
    }
    let size = u16::from_be_bytes(data[..2].try_into().unwrap()) as usize;
    FrameImage::from_rgb8(&data[2..], size)
        .map_err(|e| Error::Adapter(format!("bad frame payload: {e}")))
}

/// External key-frame codec (id 1) driven by shell command templates with
/// `{input}`, `{output}` and `{qp}` placeholders. The encode command reads a
/// frame in the [`serialize_frame`] format and writes an arbitrary payload;
/// the decode command inverts it.
#[derive(Debug, Clone)]
pub struct ExternalCodec {
    pub encode_command: String,
    pub decode_command: String,
}

static SCRATCH_COUNTER: AtomicU64 = AtomicU64::new(0);

impl ExternalCodec {
    fn scratch(&self, tag: &str) -> PathBuf {
        let n = SCRATCH_COUNTER.fetch_add(1, Ordering::Relaxed);
        std::env::temp_dir().join(format!("mttf-kf-{}-{}-{}", std::process::id(), n, tag))
    }

    fn run(&self, template: &str, input: &PathBuf, output: &PathBuf, qp: u8) -> Result<()> {
        let cmd = template
            .replace("{input}", &input.display().to_string())
            .replace("{output}", &output.display().to_string())
            .replace("{qp}", &qp.to_string());
        let result = Command::new("sh").arg("-c").arg(&cmd).output().map_err(|e| {
            Error::Adapter(format!("failed to launch key-frame codec `{cmd}`: {e}"))
        })?;
        if !result.status.success() {
            return Err(Error::Adapter(format!(
                "key-frame codec `{cmd}` exited with {}: {}",
                result.status,
                String::from_utf8_lossy(&result.stderr)
            )));
        }
        Ok(())
    }
}

impl KeyframeCodec for ExternalCodec {
    fn id(&self) -> u8 {
        EXTERNAL_CODEC_ID
    }

    fn encode(&self, frame: &FrameImage, qp: u8) -> Result<Vec<u8>> {
        let input = self.scratch("in.frame");
        let output = self.scratch("out.bin");
        let mut f = std::fs::File::create(&input)?;
        f.write_all(&serialize_frame(frame))?;
        drop(f);
        let run = self.run(&self.encode_command, &input, &output, qp);
        let payload = run.and_then(|_| Ok(std::fs::read(&output)?));
        let _ = std::fs::remove_file(&input);
        let _ = std::fs::remove_file(&output);
        payload
    }

    fn decode(&self, payload: &[u8]) -> Result<FrameImage> {
        let input = self.scratch("in.bin");
        let output = self.scratch("out.frame");
        std::fs::write(&input, payload)?;
        let run = self.run(&self.decode_command, &input, &output, 0);
        let frame = run.and_then(|_| {
            let bytes = std::fs::read(&output)?;
            deserialize_frame(&bytes)
        });
        let _ = std::fs::remove_file(&input);
        let _ = std::fs::remove_file(&output);
        frame
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn header(key_len: usize, feat_len: usize) -> StreamHeader {
        StreamHeader {
            version: VERSION,
            largest_resolution: 64,
            resolution_index: 0,
            channels: 4,
            depth: 2,
            resolution_count: 1,
            frame_count: 9,
            fps: Fps::new(25, 1),
            step_num: 1,
            step_den: 50,
            keyframe_codec_id: LOSSLESS_CODEC_ID,
            keyframe_len: key_len as u32,
            feature_len: feat_len as u32,
        }
    }

    #[test]
    fn crc32_known_vector() {
        assert_eq!(crc32(b"123456789"), 0xCBF4_3926);
        assert_eq!(crc32(b""), 0);
    }

    #[test]
    fn mux_demux_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let key: Vec<u8> = (0..rng.gen_range(0..300)).map(|_| rng.gen()).collect();
            let feat: Vec<u8> = (0..rng.gen_range(0..300)).map(|_| rng.gen()).collect();
            let h = header(key.len(), feat.len());
            let stream = mux(&h, &key, &feat).unwrap();
            let (h2, k2, f2) = demux(&stream).unwrap();
            assert_eq!(h, h2);
            assert_eq!(key, k2);
            assert_eq!(feat, f2);
        }
    }

    #[test]
    fn keyframe_only_stream_is_valid() {
        let key = vec![7u8; 100];
        let mut h = header(key.len(), 0);
        h.frame_count = 1;
        let stream = mux(&h, &key, &[]).unwrap();
        let (h2, k2, f2) = demux(&stream).unwrap();
        assert_eq!(h2.frame_count, 1);
        assert_eq!(k2, key);
        assert!(f2.is_empty());
    }

    #[test]
    fn every_single_bit_flip_in_header_is_detected() {
        let key = vec![1u8; 10];
        let feat = vec![2u8; 10];
        let stream = mux(&header(10, 10), &key, &feat).unwrap();
        for bit in 0..HEADER_LEN * 8 {
            let mut corrupted = stream.clone();
            corrupted[bit / 8] ^= 1 << (bit % 8);
            assert!(
                demux(&corrupted).is_err(),
                "flipping header bit {bit} must be detected"
            );
        }
    }

    #[test]
    fn distinct_failure_modes() {
        let stream = mux(&header(4, 4), &[1, 2, 3, 4], &[5, 6, 7, 8]).unwrap();
        // Bad magic.
        let mut bad = stream.clone();
        bad[0] = b'X';
        assert!(matches!(
            demux(&bad),
            Err(Error::Format(FormatError::BadMagic))
        ));
        // Unsupported version (crc fixed up so the version check fires).
        let mut bad = stream.clone();
        bad[4] = 99;
        assert!(matches!(
            demux(&bad),
            Err(Error::Format(FormatError::UnsupportedVersion(99)))
        ));
        // Truncated payload.
        assert!(matches!(
            demux(&stream[..stream.len() - 3]),
            Err(Error::Format(FormatError::Truncated { .. }))
        ));
        // Truncated header.
        assert!(matches!(
            demux(&stream[..10]),
            Err(Error::Format(FormatError::Truncated { .. }))
        ));
        // Length mismatch at mux time.
        assert!(matches!(
            mux(&header(5, 4), &[1, 2, 3, 4], &[5, 6, 7, 8]),
            Err(Error::Format(FormatError::LengthMismatch { .. }))
        ));
    }

    #[test]
    fn lossless_codec_roundtrip_bit_exact() {
        // An 8-bit-representable frame survives the adapter bit-exactly.
        let frame = {
            let raw: Vec<u8> = (0..3 * 16 * 16).map(|i| (i * 7 % 256) as u8).collect();
            FrameImage::from_rgb8(&raw, 16).unwrap()
        };
        let codec = LosslessCodec;
        let (payload, recon) = encode_keyframe(&frame, 32, &codec).unwrap();
        assert_eq!(recon.pixels, frame.pixels);
        assert_eq!(recon.resolution(), 16);
        // QP values used with the external adapter are accepted here too.
        for qp in [22, 32, 42, 52] {
            let (p2, _) = encode_keyframe(&frame, qp, &codec).unwrap();
            assert_eq!(p2, payload);
        }
    }

    #[test]
    fn external_codec_identity_command() {
        let frame = crate::video::synthetic_disc_frame(8, 0.2);
        let codec = ExternalCodec {
            encode_command: "cp {input} {output}".into(),
            decode_command: "cp {input} {output}".into(),
        };
        let (payload, recon) = encode_keyframe(&frame, 42, &codec).unwrap();
        assert_eq!(payload, serialize_frame(&frame));
        assert_eq!(recon.to_rgb8(), frame.to_rgb8());
    }

    #[test]
    fn external_codec_failure_carries_diagnostics() {
        let frame = crate::video::synthetic_disc_frame(8, 0.0);
        let codec = ExternalCodec {
            encode_command: "sh -c 'echo boom >&2; exit 3'".into(),
            decode_command: "cp {input} {output}".into(),
        };
        match codec.encode(&frame, 32) {
            Err(Error::Adapter(msg)) => assert!(msg.contains("boom"), "stderr captured: {msg}"),
            other => panic!("expected adapter error, got {other:?}"),
        }
    }
}
