//! Minimal 16-bit PCM mono WAV reader/writer.

use crate::error::{Error, Result};
use std::fs;
use std::io::Write;
use std::path::Path;

/// Write a waveform as 16-bit PCM mono. Samples are clamped to [-1, 1]
/// and quantized with rounding, so a write/read round trip stays within
/// half an LSB (< 2^-15).
pub fn wav_write(path: &Path, waveform: &[f64], sample_rate: u32) -> Result<()> {
    let data_size = (waveform.len() * 2) as u32;
    let mut out = Vec::with_capacity(44 + waveform.len() * 2);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_size).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&sample_rate.to_le_bytes());
    out.extend_from_slice(&(sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_size.to_le_bytes());
    for &v in waveform {
        let q = (v.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

/// Read a 16-bit PCM mono WAV file. Returns (waveform in [-1, 1],
/// sample rate). Malformed input produces a parse error carrying the byte
/// offset of the problem.
pub fn wav_read(path: &Path) -> Result<(Vec<f64>, u32)> {
    let bytes = fs::read(path)?;
    parse_wav(&bytes)
}

pub fn parse_wav(bytes: &[u8]) -> Result<(Vec<f64>, u32)> {
    let need = |off: usize, n: usize| -> Result<&[u8]> {
        bytes.get(off..off + n).ok_or(Error::Parse {
            offset: off as u64,
            msg: format!("file truncated: wanted {n} bytes"),
        })
    };
    if need(0, 4)? != b"RIFF" {
        return Err(Error::Parse {
            offset: 0,
            msg: "missing RIFF magic".to_string(),
        });
    }
    if need(8, 4)? != b"WAVE" {
        return Err(Error::Parse {
            offset: 8,
            msg: "missing WAVE form type".to_string(),
        });
    }
    let mut pos = 12usize;
    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    let mut data: Option<(usize, usize)> = None;
    while pos + 8 <= bytes.len() {
        let id = need(pos, 4)?;
        let size = u32::from_le_bytes(need(pos + 4, 4)?.try_into().unwrap()) as usize;
        let body = pos + 8;
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(Error::Parse {
                        offset: pos as u64,
                        msg: format!("fmt chunk too small ({size} bytes)"),
                    });
                }
                let f = need(body, 16)?;
                fmt = Some((
                    u16::from_le_bytes(f[0..2].try_into().unwrap()),
                    u16::from_le_bytes(f[2..4].try_into().unwrap()),
                    u32::from_le_bytes(f[4..8].try_into().unwrap()),
                    u16::from_le_bytes(f[14..16].try_into().unwrap()),
                ));
            }
            b"data" => {
                need(body, size)?;
                data = Some((body, size));
            }
            _ => {}
        }
        pos = body + size + (size & 1); // chunks are word aligned
    }
    let (format, channels, rate, bits) = fmt.ok_or(Error::Parse {
        offset: pos as u64,
        msg: "no fmt chunk found".to_string(),
    })?;
    if format != 1 || bits != 16 {
        return Err(Error::Parse {
            offset: 20,
            msg: format!("unsupported encoding (format {format}, {bits}-bit); need 16-bit PCM"),
        });
    }
    if channels != 1 {
        return Err(Error::Parse {
            offset: 22,
            msg: format!("{channels} channels; only mono is supported"),
        });
    }
    let (off, size) = data.ok_or(Error::Parse {
        offset: pos as u64,
        msg: "no data chunk found".to_string(),
    })?;
    let n = size / 2;
    let mut wave = Vec::with_capacity(n);
    for i in 0..n {
        let s = i16::from_le_bytes(bytes[off + 2 * i..off + 2 * i + 2].try_into().unwrap());
        wave.push(s as f64 / 32767.0);
    }
    Ok((wave, rate))
}
