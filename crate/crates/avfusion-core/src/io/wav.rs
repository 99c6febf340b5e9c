//! RIFF/WAV, PCM 16-bit little-endian only.
//!
//! The reader walks the chunk list, requires a PCM `fmt ` chunk before
//! `data`, skips unknown chunks (with even-byte padding), and bounds-checks
//! everything; it has to survive arbitrary bytes. Samples convert to f64 in
//! [-1, 1] as s / 32768.

use std::path::Path;

use crate::dsp::AudioChunk;
use crate::error::{AvError, Result};
use crate::tensor::Tensor;

pub fn decode(bytes: &[u8]) -> Result<AudioChunk> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(AvError::Format("wav: not a RIFF/WAVE file".into()));
    }
    let mut pos = 12usize;
    let mut fmt: Option<(u16, u32, u16)> = None; // (channels, sample_rate, bits)
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes([bytes[pos + 4], bytes[pos + 5], bytes[pos + 6], bytes[pos + 7]])
            as usize;
        let body_start = pos + 8;
        let body_end = body_start
            .checked_add(size)
            .ok_or_else(|| AvError::Format("wav: chunk size overflows".into()))?;
        if body_end > bytes.len() {
            return Err(AvError::Format(format!(
                "wav: chunk {:?} of {size} bytes runs past end of file",
                String::from_utf8_lossy(id)
            )));
        }
        let body = &bytes[body_start..body_end];
        match id {
            b"fmt " => {
                if body.len() < 16 {
                    return Err(AvError::Format("wav: fmt chunk too short".into()));
                }
                let audio_format = u16::from_le_bytes([body[0], body[1]]);
                let channels = u16::from_le_bytes([body[2], body[3]]);
                let sample_rate = u32::from_le_bytes([body[4], body[5], body[6], body[7]]);
                let bits = u16::from_le_bytes([body[14], body[15]]);
                if audio_format != 1 {
                    return Err(AvError::Format(format!(
                        "wav: unsupported format {audio_format}, want PCM (1)"
                    )));
                }
                if bits != 16 {
                    return Err(AvError::Format(format!("wav: unsupported bit depth {bits}, want 16")));
                }
                if channels == 0 || sample_rate == 0 {
                    return Err(AvError::Format("wav: zero channels or sample rate".into()));
                }
                fmt = Some((channels, sample_rate, bits));
            }
            b"data" => {
                data = Some(body);
                // a fmt chunk after data would be nonstandard; stop at data
                if fmt.is_some() {
                    break;
                }
            }
            _ => {}
        }
        // chunks are word-aligned
        pos = body_end + (size & 1);
    }
    let (channels, sample_rate, _) =
        fmt.ok_or_else(|| AvError::Format("wav: missing fmt chunk".into()))?;
    let data = data.ok_or_else(|| AvError::Format("wav: missing data chunk".into()))?;
    let channels = channels as usize;
    let frame_bytes = channels * 2;
    if data.len() % frame_bytes != 0 {
        return Err(AvError::Format(format!(
            "wav: data length {} is not a multiple of the {frame_bytes}-byte frame",
            data.len()
        )));
    }
    let n = data.len() / frame_bytes;
    if n == 0 {
        return Err(AvError::Format("wav: empty data chunk".into()));
    }
    // de-interleave into [channels, n]
    let mut samples = Tensor::<f64>::zeros(&[channels, n]);
    let sd = samples.data_mut();
    for (i, frame) in data.chunks_exact(frame_bytes).enumerate() {
        for (c, pair) in frame.chunks_exact(2).enumerate() {
            let v = i16::from_le_bytes([pair[0], pair[1]]);
            sd[c * n + i] = v as f64 / 32768.0;
        }
    }
    AudioChunk::new(samples, sample_rate)
}

pub fn load(path: &Path) -> Result<AudioChunk> {
    let bytes =
        std::fs::read(path).map_err(|e| AvError::io(path.display().to_string(), e))?;
    decode(&bytes)
}

/// Channel/rate/length information from the headers alone.
pub struct WavInfo {
    pub channels: usize,
    pub sample_rate: u32,
    pub n_samples: usize,
}

pub fn load_info(path: &Path) -> Result<WavInfo> {
    // WAV headers are tiny; reading the data chunk body is not needed, but
    // files here are at most a few MB, so a plain read keeps this simple.
    let chunk = load(path)?;
    Ok(WavInfo { channels: chunk.channels(), sample_rate: chunk.sample_rate, n_samples: chunk.len() })
}

pub fn encode(chunk: &AudioChunk) -> Vec<u8> {
    let channels = chunk.channels();
    let n = chunk.len();
    let data_len = channels * n * 2;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&(channels as u16).to_le_bytes());
    out.extend_from_slice(&chunk.sample_rate.to_le_bytes());
    let byte_rate = chunk.sample_rate * channels as u32 * 2;
    out.extend_from_slice(&byte_rate.to_le_bytes());
    out.extend_from_slice(&((channels * 2) as u16).to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for i in 0..n {
        for c in 0..channels {
            let v = (chunk.samples.data()[c * n + i] * 32767.0).round().clamp(-32768.0, 32767.0);
            out.extend_from_slice(&(v as i16).to_le_bytes());
        }
    }
    out
}

pub fn save(path: &Path, chunk: &AudioChunk) -> Result<()> {
    std::fs::write(path, encode(chunk)).map_err(|e| AvError::io(path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::DetRng;

    #[test]
    fn round_trip_preserves_quantized_samples() {
        let mut rng = DetRng::new(80);
        let n = 480;
        let data: Vec<f64> = (0..3 * n)
            .map(|_| (rng.range_f64(-1.0, 1.0) * 32767.0).round() / 32768.0)
            .collect();
        let chunk =
            AudioChunk::new(Tensor::from_vec(&[3, n], data).unwrap(), 48_000).unwrap();
        let bytes = encode(&chunk);
        let back = decode(&bytes).unwrap();
        assert_eq!(back.channels(), 3);
        assert_eq!(back.sample_rate, 48_000);
        assert_eq!(back.len(), n);
        for (a, b) in chunk.samples.data().iter().zip(back.samples.data()) {
            assert!((a - b).abs() < 1.0 / 32768.0 + 1e-12);
        }
    }

    #[test]
    fn rejects_garbage() {
        assert!(decode(b"").is_err());
        assert!(decode(b"RIFFxxxxWAVE").is_err()); // no chunks
        assert!(decode(b"OGGSxxxxWAVE").is_err());
        // fmt claims float (3) instead of PCM
        let mut b = Vec::new();
        b.extend_from_slice(b"RIFF");
        b.extend_from_slice(&100u32.to_le_bytes());
        b.extend_from_slice(b"WAVE");
        b.extend_from_slice(b"fmt ");
        b.extend_from_slice(&16u32.to_le_bytes());
        b.extend_from_slice(&3u16.to_le_bytes());
        b.extend_from_slice(&1u16.to_le_bytes());
        b.extend_from_slice(&48_000u32.to_le_bytes());
        b.extend_from_slice(&0u32.to_le_bytes());
        b.extend_from_slice(&2u16.to_le_bytes());
        b.extend_from_slice(&16u16.to_le_bytes());
        assert!(decode(&b).is_err());
    }

    #[test]
    fn skips_unknown_chunks() {
        let chunk = AudioChunk::new(
            Tensor::from_vec(&[1, 4], vec![0.0, 0.25, -0.25, 0.5]).unwrap(),
            48_000,
        )
        .unwrap();
        let bytes = encode(&chunk);
        // splice a LIST chunk between fmt and data
        let mut spliced = bytes[..36].to_vec();
        spliced.extend_from_slice(b"LIST");
        spliced.extend_from_slice(&3u32.to_le_bytes());
        spliced.extend_from_slice(b"abc\x00"); // padded to even length
        spliced.extend_from_slice(&bytes[36..]);
        let back = decode(&spliced).unwrap();
        assert_eq!(back.len(), 4);
    }

    #[test]
    fn truncated_data_chunk_is_an_error() {
        let chunk = AudioChunk::new(
            Tensor::from_vec(&[2, 8], vec![0.1; 16]).unwrap(),
            48_000,
        )
        .unwrap();
        let bytes = encode(&chunk);
        assert!(decode(&bytes[..bytes.len() - 5]).is_err());
    }
}
