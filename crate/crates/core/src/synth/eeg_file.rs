//! EEG matrix files: the NXE1 binary format plus a headerless CSV adapter
//! for real exported recordings (rows are channels).

use crate::error::{Error, Result};
use std::fs;
use std::io::Write;
use std::path::Path;

const MAGIC: &[u8; 4] = b"NXE1";

/// Channels x frames matrix, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct EegMatrix {
    pub channels: usize,
    pub frames: usize,
    pub data: Vec<f32>,
}

impl EegMatrix {
    pub fn from_f64(channels: usize, frames: usize, data: &[f64]) -> Self {
        assert_eq!(channels * frames, data.len());
        EegMatrix {
            channels,
            frames,
            data: data.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }
}

/// Binary write: magic, u32 channel count, u32 frame count, f32 payload.
pub fn eeg_write(path: &Path, m: &EegMatrix) -> Result<()> {
    let mut out = Vec::with_capacity(12 + m.data.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(m.channels as u32).to_le_bytes());
    out.extend_from_slice(&(m.frames as u32).to_le_bytes());
    for v in &m.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

/// Read either NXE1 binary or headerless CSV, keyed on the file contents.
pub fn eeg_read(path: &Path) -> Result<EegMatrix> {
    let bytes = fs::read(path)?;
    if bytes.len() >= 4 && &bytes[..4] == MAGIC {
        parse_binary(&bytes)
    } else {
        parse_csv(&bytes)
    }
}

fn parse_binary(bytes: &[u8]) -> Result<EegMatrix> {
    if bytes.len() < 12 {
        return Err(Error::Parse {
            offset: bytes.len() as u64,
            msg: "NXE1 header truncated".to_string(),
        });
    }
    let channels = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let frames = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let want = channels
        .checked_mul(frames)
        .and_then(|n| n.checked_mul(4))
        .ok_or(Error::Parse {
            offset: 4,
            msg: "implausible NXE1 dimensions".to_string(),
        })?;
    if bytes.len() < 12 + want {
        return Err(Error::Parse {
            offset: bytes.len() as u64,
            msg: format!(
                "NXE1 payload truncated: need {want} bytes for {channels}x{frames}"
            ),
        });
    }
    let mut data = Vec::with_capacity(channels * frames);
    for i in 0..channels * frames {
        data.push(f32::from_le_bytes(
            bytes[12 + 4 * i..16 + 4 * i].try_into().unwrap(),
        ));
    }
    Ok(EegMatrix {
        channels,
        frames,
        data,
    })
}

fn parse_csv(bytes: &[u8]) -> Result<EegMatrix> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::Parse {
        offset: e.valid_up_to() as u64,
        msg: "not NXE1 and not valid UTF-8 CSV".to_string(),
    })?;
    let mut rows: Vec<Vec<f32>> = Vec::new();
    let mut offset = 0u64;
    for line in text.lines() {
        let trimmed = line.trim();
        if !trimmed.is_empty() {
            let mut row = Vec::new();
            for field in trimmed.split(',') {
                let v: f32 = field.trim().parse().map_err(|_| Error::Parse {
                    offset,
                    msg: format!("bad CSV number {field:?}"),
                })?;
                row.push(v);
            }
            if let Some(first) = rows.first() {
                if first.len() != row.len() {
                    return Err(Error::Parse {
                        offset,
                        msg: format!(
                            "ragged CSV: row has {} fields, expected {}",
                            row.len(),
                            first.len()
                        ),
                    });
                }
            }
            rows.push(row);
        }
        offset += line.len() as u64 + 1;
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            offset: 0,
            msg: "empty CSV".to_string(),
        });
    }
    let channels = rows.len();
    let frames = rows[0].len();
    Ok(EegMatrix {
        channels,
        frames,
        data: rows.concat(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binary_round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.nxe");
        let m = EegMatrix {
            channels: 3,
            frames: 4,
            data: (0..12).map(|i| (i as f32) * 0.25 - 1.0).collect(),
        };
        eeg_write(&path, &m).unwrap();
        let back = eeg_read(&path).unwrap();
        assert_eq!(m, back);
        for (a, b) in m.data.iter().zip(&back.data) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn csv_adapter_parses_shape() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.csv");
        std::fs::write(&path, "1.0, 2.0, 3.0\n4.5,5.5,6.5\n").unwrap();
        let m = eeg_read(&path).unwrap();
        assert_eq!((m.channels, m.frames), (2, 3));
        assert_eq!(m.data, vec![1.0, 2.0, 3.0, 4.5, 5.5, 6.5]);
    }

    #[test]
    fn truncated_binary_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.nxe");
        let m = EegMatrix {
            channels: 2,
            frames: 5,
            data: vec![0.0; 10],
        };
        eeg_write(&path, &m).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(eeg_read(&path), Err(Error::Parse { .. })));
    }

    #[test]
    fn bad_csv_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.csv");
        std::fs::write(&path, "1.0,2.0\n3.0,oops\n").unwrap();
        match eeg_read(&path) {
            Err(Error::Parse { offset, msg }) => {
                assert!(offset >= 8, "offset {offset} should point at line 2");
                assert!(msg.contains("oops"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
