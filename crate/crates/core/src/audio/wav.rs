//! Minimal RIFF/WAVE reader and writer for 16-bit PCM.
//!
//! Stereo input is averaged to mono on read. Anything that is not PCM16
//! is rejected with a format error carrying the byte offset.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use super::Waveform;
use crate::error::{Error, Result};

pub fn read_wav(path: &Path) -> Result<Waveform> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    parse_wav(&bytes)
}

pub fn parse_wav(bytes: &[u8]) -> Result<Waveform> {
    let fail = |offset: usize, message: &str| Error::Format {
        offset: offset as u64,
        message: message.to_string(),
    };
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(fail(0, "not a RIFF/WAVE file"));
    }

    let mut pos = 12usize;
    let mut fmt: Option<(u16, u16, u32, u16)> = None; // format, channels, rate, bits
    let mut data: Option<(usize, usize)> = None; // offset, len
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes([bytes[pos + 4], bytes[pos + 5], bytes[pos + 6], bytes[pos + 7]])
            as usize;
        let body = pos + 8;
        if body + size > bytes.len() {
            return Err(fail(pos, "chunk overruns file"));
        }
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(fail(pos, "fmt chunk too short"));
                }
                let f = u16::from_le_bytes([bytes[body], bytes[body + 1]]);
                let ch = u16::from_le_bytes([bytes[body + 2], bytes[body + 3]]);
                let rate = u32::from_le_bytes([
                    bytes[body + 4],
                    bytes[body + 5],
                    bytes[body + 6],
                    bytes[body + 7],
                ]);
                let bits = u16::from_le_bytes([bytes[body + 14], bytes[body + 15]]);
                fmt = Some((f, ch, rate, bits));
            }
            b"data" => data = Some((body, size)),
            _ => {}
        }
        pos = body + size + (size & 1); // chunks are word-aligned
    }

    let (format, channels, rate, bits) = fmt.ok_or_else(|| fail(12, "missing fmt chunk"))?;
    if format != 1 || bits != 16 {
        return Err(fail(
            12,
            &format!("unsupported encoding (format {format}, {bits}-bit); only PCM16 is read"),
        ));
    }
    if channels == 0 || channels > 2 {
        return Err(fail(12, &format!("unsupported channel count {channels}")));
    }
    if rate == 0 {
        return Err(fail(12, "sample rate must be positive"));
    }
    let (off, len) = data.ok_or_else(|| fail(pos, "missing data chunk"))?;
    let frame_bytes = 2 * channels as usize;
    let n_frames = len / frame_bytes;
    let mut samples = Vec::with_capacity(n_frames);
    for i in 0..n_frames {
        let base = off + i * frame_bytes;
        let mut acc = 0.0f64;
        for c in 0..channels as usize {
            let s = i16::from_le_bytes([bytes[base + 2 * c], bytes[base + 2 * c + 1]]);
            acc += s as f64 / 32768.0;
        }
        samples.push(acc / channels as f64);
    }
    Ok(Waveform {
        samples,
        sample_rate: rate,
    })
}

/// Writes mono 16-bit PCM; samples are clamped to [-1, 1].
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    let data_len = (w.samples.len() * 2) as u32;
    out.write_all(b"RIFF")?;
    out.write_all(&(36 + data_len).to_le_bytes())?;
    out.write_all(b"WAVE")?;
    out.write_all(b"fmt ")?;
    out.write_all(&16u32.to_le_bytes())?;
    out.write_all(&1u16.to_le_bytes())?; // PCM
    out.write_all(&1u16.to_le_bytes())?; // mono
    out.write_all(&w.sample_rate.to_le_bytes())?;
    out.write_all(&(w.sample_rate * 2).to_le_bytes())?;
    out.write_all(&2u16.to_le_bytes())?;
    out.write_all(&16u16.to_le_bytes())?;
    out.write_all(b"data")?;
    out.write_all(&data_len.to_le_bytes())?;
    for &s in &w.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_mono() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.wav");
        let w = Waveform {
            samples: vec![0.0, 0.25, -0.25, 0.5],
            sample_rate: 16000,
        };
        write_wav(&path, &w).unwrap();
        let r = read_wav(&path).unwrap();
        assert_eq!(r.sample_rate, 16000);
        assert_eq!(r.samples.len(), 4);
        for (a, b) in r.samples.iter().zip(&w.samples) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    #[test]
    fn stereo_averages_to_mono() {
        // hand-build a stereo file with L=0.5, R=-0.5 -> mono 0
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"RIFF");
        bytes.extend_from_slice(&(36u32 + 4).to_le_bytes());
        bytes.extend_from_slice(b"WAVE");
        bytes.extend_from_slice(b"fmt ");
        bytes.extend_from_slice(&16u32.to_le_bytes());
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(&2u16.to_le_bytes());
        bytes.extend_from_slice(&8000u32.to_le_bytes());
        bytes.extend_from_slice(&32000u32.to_le_bytes());
        bytes.extend_from_slice(&4u16.to_le_bytes());
        bytes.extend_from_slice(&16u16.to_le_bytes());
        bytes.extend_from_slice(b"data");
        bytes.extend_from_slice(&4u32.to_le_bytes());
        bytes.extend_from_slice(&16384i16.to_le_bytes());
        bytes.extend_from_slice(&(-16384i16).to_le_bytes());
        let w = parse_wav(&bytes).unwrap();
        assert_eq!(w.samples.len(), 1);
        assert!(w.samples[0].abs() < 1e-9);
    }

    #[test]
    fn rejects_non_pcm() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"RIFF");
        bytes.extend_from_slice(&36u32.to_le_bytes());
        bytes.extend_from_slice(b"WAVE");
        bytes.extend_from_slice(b"fmt ");
        bytes.extend_from_slice(&16u32.to_le_bytes());
        bytes.extend_from_slice(&3u16.to_le_bytes()); // IEEE float
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(&16000u32.to_le_bytes());
        bytes.extend_from_slice(&64000u32.to_le_bytes());
        bytes.extend_from_slice(&4u16.to_le_bytes());
        bytes.extend_from_slice(&32u16.to_le_bytes());
        bytes.extend_from_slice(b"data");
        bytes.extend_from_slice(&0u32.to_le_bytes());
        assert!(matches!(parse_wav(&bytes), Err(Error::Format { .. })));
    }
}
