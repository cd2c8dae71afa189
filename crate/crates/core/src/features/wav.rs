//! Minimal RIFF/WAVE PCM16 mono reader and writer.

use std::path::Path;

use crate::error::{AtmError, Result};

pub const SAMPLE_RATE: u32 = 16_000;

fn fmt_err(field: &'static str, detail: impl Into<String>) -> AtmError {
    AtmError::WavFormat {
        field,
        detail: detail.into(),
    }
}

fn u16_at(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

/// Decode a 16 kHz PCM16 mono WAV image into samples in `[-1, 1)`.
pub fn decode_wav(bytes: &[u8]) -> Result<Vec<f32>> {
    if bytes.len() < 12 || &bytes[..4] != b"RIFF" {
        return Err(fmt_err("riff", "missing RIFF tag"));
    }
    if &bytes[8..12] != b"WAVE" {
        return Err(fmt_err("wave", "missing WAVE tag"));
    }
    let mut pos = 12;
    let mut fmt_seen = false;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_at(bytes, pos + 4) as usize;
        let body = pos + 8;
        let end = body
            .checked_add(size)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| fmt_err("chunk_size", format!("chunk {:?} overruns file", String::from_utf8_lossy(id))))?;
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(fmt_err("fmt", format!("chunk too small ({size} bytes)")));
                }
                let format = u16_at(bytes, body);
                if format != 1 {
                    return Err(fmt_err("audio_format", format!("{format} (only PCM=1 supported)")));
                }
                let channels = u16_at(bytes, body + 2);
                if channels != 1 {
                    return Err(fmt_err("channels", format!("{channels} (only mono supported)")));
                }
                let rate = u32_at(bytes, body + 4);
                if rate != SAMPLE_RATE {
                    return Err(AtmError::SampleRate(rate));
                }
                let bits = u16_at(bytes, body + 14);
                if bits != 16 {
                    return Err(fmt_err("bits_per_sample", format!("{bits} (only 16 supported)")));
                }
                fmt_seen = true;
            }
            b"data" => {
                if !fmt_seen {
                    return Err(fmt_err("fmt", "data chunk before fmt chunk"));
                }
                if !size.is_multiple_of(2) {
                    return Err(fmt_err("data", format!("odd byte count {size}")));
                }
                return Ok(bytes[body..end]
                    .chunks_exact(2)
                    .map(|c| i16::from_le_bytes([c[0], c[1]]) as f32 / 32768.0)
                    .collect());
            }
            _ => {}
        }
        pos = end + (size & 1);
    }
    Err(fmt_err(if fmt_seen { "data" } else { "fmt" }, "chunk not found"))
}

/// Encode samples as 16 kHz PCM16 mono, clipping to the representable range.
pub fn encode_wav(samples: &[f32]) -> Vec<u8> {
    let data_len = (samples.len() * 2) as u32;
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&SAMPLE_RATE.to_le_bytes());
    out.extend_from_slice(&(SAMPLE_RATE * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in samples {
        let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    out
}

pub fn read_wav(path: &Path) -> Result<Vec<f32>> {
    let bytes = std::fs::read(path).map_err(|e| AtmError::io(path, e))?;
    decode_wav(&bytes)
}

pub fn write_wav(path: &Path, samples: &[f32]) -> Result<()> {
    std::fs::write(path, encode_wav(samples)).map_err(|e| AtmError::io(path, e))
}
